use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pcac_core::bitstream::{decode_sequence_file, encode_sequence_file, EncodedSequence, DEFAULT_GOP};
use pcac_core::eval::{
    bd_metrics, emit_report, parse_rd_csv, run_rd_sweep, BdEntry, BdResult, DistortionMap,
    RDCurve,
};
use pcac_core::network::CodecModel;
use pcac_core::pointcloud::{ply_files, write_ply, FrameSequence, PlyFormat};
use pcac_core::trainer::{fit_with_hook, TrainConfig};

#[derive(Parser)]
#[command(name = "pcac", version, about = "Learned attribute codec for dynamic point clouds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model for one lambda.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Directory of PLY frames, or of sequence subdirectories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Voxel depth, when the PLY files do not state it.
        #[arg(long)]
        depth: Option<u32>,
    },
    /// Compress the colors of a PLY sequence.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GOP)]
        gop: usize,
        #[arg(long)]
        depth: Option<u32>,
    },
    /// Rebuild colors onto known geometry.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        depth: Option<u32>,
    },
    /// RD sweep over several models, with report files.
    Eval {
        /// Comma-separated model files.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GOP)]
        gop: usize,
        /// Optional anchor RD csv for BD metrics.
        #[arg(long)]
        anchor: Option<PathBuf>,
        #[arg(long)]
        depth: Option<u32>,
    },
    /// BD-rate and BD-quality between two RD csv files.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            lambda,
            data,
            out,
            depth,
        } => train(config.as_deref(), lambda, &data, &out, depth),
        Cmd::Encode {
            model,
            input,
            out,
            gop,
            depth,
        } => encode(&model, &input, &out, gop, depth),
        Cmd::Decode {
            model,
            geometry,
            input,
            out,
            depth,
        } => decode(&model, &geometry, &input, &out, depth),
        Cmd::Eval {
            models,
            seq,
            out,
            gop,
            anchor,
            depth,
        } => eval(&models, &seq, &out, gop, anchor.as_deref(), depth),
        Cmd::Bdrate { anchor, test } => bdrate(&anchor, &test),
    }
}

fn load_model(path: &Path) -> Result<CodecModel> {
    CodecModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_seq(dir: &Path, depth: Option<u32>) -> Result<FrameSequence> {
    FrameSequence::load_dir(dir, depth).with_context(|| format!("loading {}", dir.display()))
}

/// A directory holding PLY files is one sequence; otherwise every
/// subdirectory with PLY files is.
fn load_training_data(dir: &Path, depth: Option<u32>) -> Result<Vec<FrameSequence>> {
    if !ply_files(dir)?.is_empty() {
        return Ok(vec![load_seq(dir, depth)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut seqs = Vec::new();
    for d in subdirs {
        if !ply_files(&d)?.is_empty() {
            seqs.push(load_seq(&d, depth)?);
        }
    }
    if seqs.is_empty() {
        bail!("no PLY files under {}", dir.display());
    }
    Ok(seqs)
}

fn train(
    config: Option<&Path>,
    lambda: Option<f64>,
    data: &Path,
    out: &Path,
    depth: Option<u32>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(l) = lambda {
        cfg.lambda = l;
    }
    cfg.validate()?;
    let seqs = load_training_data(data, depth)?;
    let frames: usize = seqs.iter().map(FrameSequence::len).sum();
    eprintln!(
        "training lambda={} on {} sequence(s), {frames} frames",
        cfg.lambda,
        seqs.len()
    );
    let (model, log) = fit_with_hook(&seqs, &cfg, &mut |r| {
        eprintln!(
            "epoch {:4} lr {:.3e} train {:.4} val {:.4} bits/elem {:.4} mse {:.3e}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.rate_bits_per_elem, r.mse
        );
    })?;
    model.save(out)?;
    let log_path = out.with_extension("log.csv");
    fs::write(&log_path, log.to_csv())?;
    if let Some(b) = log.best_epoch {
        eprintln!("best epoch {b}");
    }
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn encode(model: &Path, input: &Path, out: &Path, gop: usize, depth: Option<u32>) -> Result<()> {
    let model = load_model(model)?;
    let seq = load_seq(input, depth)?;
    let enc = encode_sequence_file(&seq, &model, gop)?;
    enc.encoded.save(out)?;
    for (t, s) in enc.stats.iter().enumerate() {
        println!(
            "frame {t:4} {:?} points {:7} payload {:9} bits bpp {:.4}",
            s.frame_type, s.points, s.payload_bits, s.bpp
        );
    }
    println!(
        "wrote {} ({} bytes)",
        out.display(),
        fs::metadata(out)?.len()
    );
    Ok(())
}

fn decode(model: &Path, geometry: &Path, input: &Path, out: &Path, depth: Option<u32>) -> Result<()> {
    let model = load_model(model)?;
    let geo = load_seq(geometry, depth)?;
    let enc = EncodedSequence::load(input).with_context(|| format!("reading {}", input.display()))?;
    let frames = decode_sequence_file(&enc, &geo, &model)?;
    fs::create_dir_all(out)?;
    for (f, path) in frames.iter().zip(ply_files(geometry)?) {
        let name = path.file_name().context("geometry file without a name")?;
        write_ply(f, &out.join(name), PlyFormat::BinaryLittleEndian)?;
    }
    println!("decoded {} frames into {}", frames.len(), out.display());
    Ok(())
}

fn print_bd(anchor: &str, test: &str, r: &BdResult) {
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{test} vs {anchor}: BD-rate Y {:+.3}% YUV {:+.3}%, BD-quality Y {:+.4} dB YUV {:+.4} dB",
        r.y.rate_percent, r.yuv.rate_percent, r.y.quality_db, r.yuv.quality_db
    );
}

fn eval(
    models: &[PathBuf],
    seq: &Path,
    out: &Path,
    gop: usize,
    anchor: Option<&Path>,
    depth: Option<u32>,
) -> Result<()> {
    let loaded = models.iter().map(|m| load_model(m)).collect::<Result<Vec<_>>>()?;
    let seq = load_seq(seq, depth)?;
    let label = "pcac";
    let (curve, evals) = run_rd_sweep(label, &seq, &loaded, gop)?;
    for (m, e) in models.iter().zip(&evals) {
        let p = e.point;
        println!(
            "{}: lambda {} bpp {:.4} PSNR-Y {:.3} PSNR-YUV {:.3} enc {:.3}s dec {:.3}s per frame",
            m.display(),
            e.lambda,
            p.bpp,
            p.psnr_y,
            p.psnr_yuv,
            p.encode_seconds,
            p.decode_seconds
        );
    }
    let mut curves = vec![curve];
    let mut bd = Vec::new();
    if let Some(a) = anchor {
        let text = fs::read_to_string(a).with_context(|| format!("reading {}", a.display()))?;
        let anchors = parse_rd_csv(&text, "anchor")?;
        for ac in anchors {
            let r = bd_metrics(&ac, &curves[0])?;
            print_bd(&ac.label, label, &r);
            bd.push(BdEntry {
                anchor: ac.label.clone(),
                test: label.to_string(),
                result: r,
            });
            curves.push(ac);
        }
    }
    let first = seq.frames().iter().position(|f| !f.is_empty());
    let maps: Vec<DistortionMap> = match first {
        Some(i) => evals
            .iter()
            .map(|e| DistortionMap {
                name: format!("lambda{}_frame{i}", e.lambda),
                reference: seq.frames()[i].clone(),
                reconstruction: e.reconstructions[i].clone(),
            })
            .collect(),
        None => Vec::new(),
    };
    let files = emit_report(&curves, &bd, &maps, out)?;
    println!(
        "wrote {}, {}, {} and {} distortion map(s)",
        files.rd_curve.display(),
        files.bd_summary.display(),
        files.plot.display(),
        files.distortion_maps.len()
    );
    Ok(())
}

fn read_curve(path: &Path) -> Result<RDCurve> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut curves = parse_rd_csv(&text, &stem)?;
    if curves.len() != 1 {
        bail!(
            "{} holds {} curves; expected exactly one",
            path.display(),
            curves.len()
        );
    }
    Ok(curves.remove(0))
}

fn bdrate(anchor: &Path, test: &Path) -> Result<()> {
    let a = read_curve(anchor)?;
    let t = read_curve(test)?;
    let r = bd_metrics(&a, &t)?;
    print_bd(&a.label, &t.label, &r);
    Ok(())
}
