use std::fs;
use std::path::{Path, PathBuf};

use cylseg::eval::{cli_main_with, RunConfig, Split};
use cylseg::io::{encode_kitti_bin, read_kitti_labels, write_kitti_labels, LabelMap};
use cylseg::network::Network;
use cylseg::training::evaluate;

const TINY: &str = r#"
seed = 3

[grid]
rho_range = [0.0, 20.0]
z_range = [-3.0, 2.0]
resolution = [16, 16, 8]

[cubic]
x_range = [-20.0, 20.0]
y_range = [-20.0, 20.0]
z_range = [-3.0, 2.0]
resolution = [16, 16, 8]

[network]
num_classes = 3
base_channels = 4
num_stages = 2
point_mlp_widths = [8]

[labels]
class_names = ["ground", "pole", "box"]

[data]
train_scenes = 3
val_scenes = 1
test_scenes = 2
points_per_scene = 300
max_range = 20.0

[train]
epochs = 2

[stats]
distance_edges = [0.0, 10.0, 20.0]
"#;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn cli(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cylseg").chain(args.iter().copied());
    let code = cli_main_with(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cli(&[]).code, 2);
    assert_eq!(cli(&["frobnicate"]).code, 2);
    assert_eq!(cli(&["stats"]).code, 2);
    assert_eq!(cli(&["stats", "--config", "/nonexistent/run.toml"]).code, 2);
    assert_eq!(cli(&["--help"]).code, 0);
    let (_d, cfg) = setup("[network]\nwidth = 4\n");
    let r = cli(&["stats", "-c", s(&cfg)]);
    assert_eq!(r.code, 2);
    assert!(r.err.contains("width"), "{}", r.err);
    let (_d, cfg) = setup(TINY);
    assert_eq!(cli(&["--threads", "0", "stats", "-c", s(&cfg)]).code, 2);
}

#[test]
fn runtime_errors_exit_1() {
    let (dir, cfg) = setup(TINY);
    let r = cli(&["eval", "-c", s(&cfg), "--checkpoint", s(&dir.path().join("missing.ckpt"))]);
    assert_eq!(r.code, 1, "{}", r.err);
}

#[test]
fn selftest_small_run_passes() {
    let r = cli(&["selftest", "--instances", "18", "--cap", "2"]);
    assert_eq!(r.code, 0, "{}{}", r.out, r.err);
    assert!(r.out.contains("selftest passed"));
    assert!(!r.out.contains("FAIL"));
}

#[test]
fn stats_and_bound_csv() {
    let (_d, cfg) = setup(TINY);
    let r = cli(&["stats", "-c", s(&cfg)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let lines: Vec<&str> = r.out.lines().collect();
    assert_eq!(lines[0], "scheme,distance_lo,distance_hi,nonempty_proportion");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("cylindrical,0,10,"));

    let r = cli(&["bound", "-c", s(&cfg)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let lines: Vec<&str> = r.out.lines().collect();
    assert_eq!(lines[0], "scheme,encoding,scan,upper_bound_miou");
    // 2 schemes × 2 encodings × (2 scans + mean)
    assert_eq!(lines.len(), 1 + 12);
    let value = |scheme: &str, enc: &str| -> f64 {
        let row = lines
            .iter()
            .find(|l| l.starts_with(&format!("{scheme},{enc},mean,")))
            .unwrap();
        row.rsplit(',').next().unwrap().parse().unwrap()
    };
    for scheme in ["cylindrical", "cubic"] {
        let (maj, min) = (value(scheme, "majority"), value(scheme, "minority"));
        assert!(maj >= min && maj <= 1.0 && min > 0.0);
    }
}

#[test]
fn train_eval_infer_pipeline() {
    let (dir, cfg) = setup(TINY);
    let r = cli(&["train", "-c", s(&cfg)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let ckpt = dir.path().join("model.ckpt");
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,l_voxel_ce,l_voxel_lovasz,l_point_ce,total,val_miou\n"));
    assert_eq!(metrics.lines().count(), 3);

    let eval = cli(&["eval", "-c", s(&cfg)]);
    assert_eq!(eval.code, 0, "{}", eval.err);
    assert!(eval.out.contains("ground") && eval.out.contains("mIoU"));

    let pred_a = dir.path().join("a");
    let pred_b = dir.path().join("b");
    assert_eq!(cli(&["infer", "-c", s(&cfg), "--out", s(&pred_a)]).code, 0);
    assert_eq!(cli(&["--threads", "1", "infer", "-c", s(&cfg), "--out", s(&pred_b)]).code, 0);
    for name in ["test_000000.label", "test_000001.label"] {
        assert_eq!(fs::read(pred_a.join(name)).unwrap(), fs::read(pred_b.join(name)).unwrap());
    }

    // emitted files decode to the network's predictions
    let rc = RunConfig::load(&cfg).unwrap();
    let net = Network::load(&ckpt).unwrap();
    let scans = rc.scans(Split::Test, true).unwrap();
    for scan in &scans {
        let back = read_kitti_labels(pred_a.join(format!("{}.label", scan.name)), &rc.label_map).unwrap();
        assert_eq!(back, net.predict(&scan.cloud).unwrap());
    }

    // scoring the files equals scoring in memory
    let from_files = cli(&["eval", "-c", s(&cfg), "--predictions", s(&pred_a)]);
    assert_eq!(from_files.code, 0);
    assert_eq!(from_files.out, eval.out);
    let clouds: Vec<_> = scans.iter().map(|s| s.cloud.clone()).collect();
    let cm = evaluate(&net, &clouds, rc.label_map.ignore_id()).unwrap();
    assert_eq!(from_files.out, cm.format_table(rc.class_names.as_deref()));
}

#[test]
fn perfect_predictions_score_100() {
    let (dir, cfg) = setup(TINY);
    let rc = RunConfig::load(&cfg).unwrap();
    let pred = dir.path().join("truth");
    fs::create_dir(&pred).unwrap();
    for scan in rc.scans(Split::Test, true).unwrap() {
        let labels = scan.cloud.labels.unwrap();
        write_kitti_labels(pred.join(format!("{}.label", scan.name)), &labels, &rc.label_map).unwrap();
    }
    let r = cli(&["eval", "-c", s(&cfg), "--predictions", s(&pred)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("mIoU              100.0"), "{}", r.out);
}

#[test]
fn kitti_layout_with_custom_map() {
    let dir = tempfile::tempdir().unwrap();
    let velo = dir.path().join("seq/velodyne");
    let labels = dir.path().join("seq/labels");
    fs::create_dir_all(&velo).unwrap();
    fs::create_dir_all(&labels).unwrap();
    // raw ids 40 (ground), 80 (pole), 10 (box); 0 unlabeled
    let text = TINY.replace(
        "[labels]\nclass_names = [\"ground\", \"pole\", \"box\"]\n",
        "[labels]\npreset = \"custom\"\ninverse = [40, 80, 10]\n[labels.map]\n40 = 0\n48 = 0\n80 = 1\n10 = 2\n0 = 255\n",
    );
    let synth = RunConfig::parse(&text, dir.path()).unwrap();
    let map: LabelMap = synth.label_map.clone();
    let mut list = Vec::new();
    for (i, scan) in synth.scans(Split::Test, true).unwrap().into_iter().enumerate() {
        let bin = velo.join(format!("{i:06}.bin"));
        fs::write(&bin, encode_kitti_bin(&scan.cloud)).unwrap();
        let mut raw = Vec::new();
        for (j, &t) in scan.cloud.labels.as_ref().unwrap().iter().enumerate() {
            // instance id in the upper half must be ignored
            let id = if j % 7 == 0 { 0 } else { map.to_raw(t) };
            raw.extend_from_slice(&(id | ((j as u32 % 5) << 16)).to_le_bytes());
        }
        fs::write(labels.join(format!("{i:06}.label")), raw).unwrap();
        list.push(format!("\"seq/velodyne/{i:06}.bin\""));
    }
    let text = text
        .replace("[data]\n", &format!("[data]\nsource = \"kitti\"\ntest = [{}]\n", list.join(", ")))
        .replace("train_scenes = 3\nval_scenes = 1\ntest_scenes = 2\npoints_per_scene = 300\nmax_range = 20.0\n", "");
    let cfg = dir.path().join("kitti.toml");
    fs::write(&cfg, &text).unwrap();
    let rc = RunConfig::load(&cfg).unwrap();
    let scans = rc.scans(Split::Test, true).unwrap();
    assert_eq!(scans[0].name, "000000");
    assert_eq!(scans[0].cloud.labels.as_ref().unwrap()[0], 255);

    assert_eq!(cli(&["stats", "-c", s(&cfg)]).code, 0);
    assert_eq!(cli(&["bound", "-c", s(&cfg)]).code, 0);
    let net = Network::new(rc.network.clone(), 0).unwrap();
    net.save(dir.path().join("model.ckpt")).unwrap();
    let out = dir.path().join("pred");
    let r = cli(&["infer", "-c", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let bytes = fs::read(out.join("000000.label")).unwrap();
    assert_eq!(bytes.len(), 4 * scans[0].cloud.len());
    for w in bytes.chunks_exact(4) {
        let id = u32::from_le_bytes([w[0], w[1], w[2], w[3]]);
        assert!([40, 80, 10].contains(&id));
    }
}
