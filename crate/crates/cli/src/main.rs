use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use i2c2w::charset::CharSet;
use i2c2w::checkpoint::load_checkpoint;
use i2c2w::config::parse_kv;
use i2c2w::model::image_tensor;
use i2c2w::synthdata::{generate_dataset, read_vocab, DegradationRanges, GrayImage, Manifest};
use i2c2w::trainer::{describe, evaluate, train, EvalMode, TrainConfig};
use i2c2w::{Error, Model32};

/// Scene text recognition by parallel character detection and word decoding.
#[derive(Parser, Debug)]
#[command(name = "i2c2w", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic labelled dataset.
    GenData(GenData),
    /// Train a model and write model.ckpt and metrics.csv.
    Train(Train),
    /// Word accuracy of a checkpoint on a dataset.
    Eval(Eval),
    /// Recognize one image and list the detected candidates.
    Recognize(Recognize),
    /// Write one attention heatmap per detection query.
    AttnExport(AttnExport),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    count: usize,
    /// Word list, one per line.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "mild", value_parser = ["zero", "mild", "moderate"])]
    degradation: String,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value file with defaults; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_transformer: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "i2c2w", value_parser = ["i2c2w", "i2c_only"])]
    mode: String,
}

#[derive(Args, Debug)]
struct Recognize {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args, Debug)]
struct AttnExport {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_model(path: &Path) -> Result<Model32, Error> {
    Ok(load_checkpoint::<f32>(path)?.model)
}

fn load_image(path: &Path) -> Result<GrayImage, Error> {
    Ok(GrayImage::read_png(path)?.fit_canvas())
}

fn gen_data(a: GenData) -> Result<(), Error> {
    let ranges = DegradationRanges::by_name(&a.degradation)
        .ok_or_else(|| Error::Config(format!("unknown degradation preset {:?}", a.degradation)))?;
    let vocab = read_vocab(&a.vocab)?;
    let m = generate_dataset(a.count, &vocab, &ranges, a.seed, &a.out)?;
    println!("wrote {} samples to {}", m.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: Train) -> Result<(), Error> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        cfg.apply_kv(&parse_kv(&text)?)?;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.n_queries {
        cfg.model.n_queries = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.lr_backbone {
        cfg.lr_backbone = v;
    }
    if let Some(v) = a.lr_transformer {
        cfg.lr_transformer = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let manifest = Manifest::read(&a.manifest)?;
    let report = train(&cfg, &manifest, &a.out)?;
    println!("{}", describe(&report));
    if let Some(p) = report.checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<(), Error> {
    let mode: EvalMode = a.mode.parse()?;
    let model = load_model(&a.ckpt)?;
    let samples = Manifest::read(&a.manifest)?.load()?;
    let report = evaluate(&model, &samples)?;
    println!("mode={} accuracy={:.4} samples={}", a.mode, report.accuracy(mode), report.count);
    Ok(())
}

fn recognize_cmd(a: Recognize) -> Result<(), Error> {
    let model = load_model(&a.ckpt)?;
    let img = image_tensor::<f32>(&load_image(&a.image)?)?;
    let r = model.recognize(&img)?;
    let null_pos = model.config().position_set().null_pos_index();
    println!("word\t{}", r.word);
    println!("i2c_word\t{}", r.i2c_word);
    println!("query\tchar\tpos\tchar_prob\tpos_prob");
    for c in &r.candidates {
        let pos = if c.pos_class == null_pos {
            "-".to_string()
        } else {
            c.pos_class.to_string()
        };
        println!(
            "{}\t{}\t{}\t{:.4}\t{:.4}",
            c.query,
            CharSet.symbol(c.char_class),
            pos,
            c.char_prob(),
            c.pos_prob()
        );
    }
    Ok(())
}

fn attn_export(a: AttnExport) -> Result<(), Error> {
    let model = load_model(&a.ckpt)?;
    let img = image_tensor::<f32>(&load_image(&a.image)?)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let null_pos = model.config().position_set().null_pos_index();
    let maps = model.attention_maps(&img)?;
    for m in &maps {
        m.to_image().write_png(&a.out.join(m.file_name(null_pos)))?;
    }
    println!("wrote {} heatmaps to {}", maps.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Recognize(a) => recognize_cmd(a),
        Command::AttnExport(a) => attn_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
