use std::path::Path;
use std::process::Command;

use pcac_core::pointcloud::{ply_files, write_ply, FrameSequence, PlyFormat};
use pcac_core::synthetic::{smooth_sequence, SyntheticSpec};

fn pcac(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_pcac"))
        .args(args)
        .output()
        .expect("spawn pcac");
    assert!(
        out.status.success(),
        "pcac {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_frames(dir: &Path, frames: usize) -> FrameSequence {
    let spec = SyntheticSpec {
        depth: 4,
        radius: 6.0,
        frames,
        ..SyntheticSpec::default()
    };
    let seq = smooth_sequence(&spec).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    for (i, f) in seq.frames().iter().enumerate() {
        write_ply(f, &dir.join(format!("frame_{i:03}.ply")), PlyFormat::Ascii).unwrap();
    }
    seq
}

#[test]
fn train_encode_decode_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("frames");
    let seq = write_frames(&data, 4);
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();

    // latent widths far apart so the two rates cannot coincide
    let tiny = "# tiny\nnarrow=4\nwide=4\nres_blocks=0\nmax_epochs=2\nbatches_per_epoch=1\ncrop_size=16\nval_samples=1\n";
    std::fs::write(root.join("a.cfg"), format!("{tiny}latent=2\n")).unwrap();
    std::fs::write(root.join("b.cfg"), format!("{tiny}latent=16\n")).unwrap();
    let data_s = data.to_string_lossy().into_owned();
    for (lam, name, cfg) in [("0.05", "a.pcac", "a.cfg"), ("0.5", "b.pcac", "b.cfg")] {
        pcac(&["train", "--config", &p(cfg), "--lambda", lam, "--data", &data_s, "--out", &p(name)]);
        assert!(root.join(name).exists());
    }
    let log = std::fs::read_to_string(root.join("a.log.csv")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("epoch,")));

    let stdout = pcac(&["encode", "--model", &p("a.pcac"), "--in", &data_s, "--out", &p("seq.pcas"), "--gop", "2"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("frame")).count(), 4);

    pcac(&["decode", "--model", &p("a.pcac"), "--geometry", &data_s, "--in", &p("seq.pcas"), "--out", &p("decoded")]);
    let decoded = FrameSequence::load_dir(&root.join("decoded"), Some(4)).unwrap();
    assert_eq!(decoded.len(), 4);
    for (d, o) in decoded.frames().iter().zip(seq.frames()) {
        assert_eq!(d.coords(), o.coords());
    }
    assert_eq!(ply_files(&root.join("decoded")).unwrap().len(), 4);

    // decoding with the other model is refused
    let bad = Command::new(env!("CARGO_BIN_EXE_pcac"))
        .args(["decode", "--model", &p("b.pcac"), "--geometry", &data_s, "--in", &p("seq.pcas"), "--out", &p("x")])
        .output()
        .unwrap();
    assert!(!bad.status.success());

    let models = format!("{},{}", p("a.pcac"), p("b.pcac"));
    pcac(&["eval", "--models", &models, "--seq", &data_s, "--out", &p("report")]);
    let csv = std::fs::read_to_string(root.join("report/rd_curve.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "label,bpp,psnr_y,psnr_yuv,enc_s,dec_s");
    assert_eq!(csv.lines().count(), 3);
    assert!(root.join("report/rd_curve.svg").exists());
}

#[test]
fn bdrate_of_scaled_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("anchor.csv");
    let t = tmp.path().join("test.csv");
    std::fs::write(&a, "bpp,psnr_y\n0.1,30\n0.2,33\n0.4,36\n0.8,39\n").unwrap();
    std::fs::write(&t, "bpp,psnr_y\n0.05,30\n0.1,33\n0.2,36\n0.4,39\n").unwrap();
    let out = pcac(&["bdrate", "--anchor", a.to_str().unwrap(), "--test", t.to_str().unwrap()]);
    assert!(out.contains("BD-rate Y -50.000%"), "{out}");
}

#[test]
fn bad_config_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("f");
    write_frames(&data, 2);
    let cfg = tmp.path().join("c.cfg");
    std::fs::write(&cfg, "learning_rate=1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pcac"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", "/dev/null"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}
