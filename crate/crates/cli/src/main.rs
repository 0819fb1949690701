use std::path::{Path, PathBuf};

use act_core::head::{Fusion, TrainConfig, SCORE_FLOOR};
use act_core::matchloss::DEFAULT_HNM_RATIO;
use act_core::linker::LinkerConfig;
use act_core::metrics::ErrorFactor;
use act_core::synthlab::formats::{read_detections, read_tubes, write_detections, write_file, write_tubes};
use act_core::synthlab::pipeline::{
    detect_dataset, detections_k, error_report, evaluate_dataset, generate_dataset, link_detections, recall_study,
    recall_tsv, train_stream, DetectConfig,
};
use act_core::synthlab::{Dataset, DatasetConfig, ModelFile, Split, Stream};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Tubelet detection pipeline on synthetic feature videos.
///
/// Set ACT_THREADS to bound the worker threads.
#[derive(Parser)]
#[command(name = "act", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a config file.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detection head on one stream of the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Sequence length; defaults to the dataset's.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "rgb")]
        stream: Stream,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        momentum: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_HNM_RATIO)]
        hnm_ratio: f64,
        /// Write per-step losses here as TSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Score every sequence of a split with one or two stream models.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_rgb: PathBuf,
        #[arg(long, requires = "fusion")]
        model_flow: Option<PathBuf>,
        #[arg(long, requires = "model_flow")]
        fusion: Option<Fusion>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SCORE_FLOOR)]
        score_floor: f64,
        /// Tubelets kept per sequence and class.
        #[arg(long, default_value_t = 50)]
        keep: usize,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Link detected tubelets into tubes.
    Link {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        tau: f64,
        #[arg(long, default_value_t = 0.3)]
        nms: f64,
        #[arg(long, default_value_t = 10)]
        topn: usize,
        #[arg(long, default_value_t = SCORE_FLOOR)]
        score_floor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate tubes on the test split.
    Eval {
        #[arg(long)]
        tubes: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frame metrics use these tubelets instead of the tubes.
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Also write `metric<TAB>value` lines here.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Anchor recall of the annotated tubes for several sequence lengths.
    Recall {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8,10,32")]
        k_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        thresholds: Vec<f64>,
    },
    /// Frame-level error breakdown of detected tubelets on the test split.
    Errors {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn open(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("cannot open dataset {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = DatasetConfig::read(&config)?;
            let m = generate_dataset(&cfg, &out)?;
            eprintln!("wrote {} videos to {}", m.videos.len(), out.display());
        }
        Command::Train { data, k, stream, out, lr, momentum, batch, epochs, seed, hnm_ratio, curve } => {
            let ds = open(&data)?;
            let k = k.unwrap_or(ds.manifest.layout.k);
            let cfg = TrainConfig { learning_rate: lr, momentum, batch_size: batch, epochs, seed, hnm_ratio };
            let (model, outcome) = train_stream(&ds, stream, k, &cfg)?;
            model.write(&out)?;
            if let Some(path) = curve {
                write_file(&path, outcome.curve_tsv().as_bytes())?;
            }
            if let Some(last) = outcome.epoch_losses.last() {
                eprintln!("final epoch loss {last:.6}");
            }
        }
        Command::Detect { data, model_rgb, model_flow, fusion, out, score_floor, keep, split } => {
            let ds = open(&data)?;
            let rgb = ModelFile::read(&model_rgb)?;
            let flow = model_flow.as_deref().map(ModelFile::read).transpose()?;
            let cfg = DetectConfig { score_floor, keep_per_class: keep, split };
            let pair = flow.as_ref().zip(fusion);
            let dets = detect_dataset(&ds, &rgb, pair, &cfg)?;
            write_detections(&out, &dets)?;
        }
        Command::Link { dets, tau, nms, topn, score_floor, out } => {
            let set = read_detections(&dets)?;
            let Some(k) = detections_k(&set) else {
                write_tubes(&out, &Default::default())?;
                return Ok(());
            };
            let cfg = LinkerConfig { tau, nms_threshold: nms, top_n: topn, score_floor, ..LinkerConfig::new(k) };
            cfg.validate()?;
            write_tubes(&out, &link_detections(&set, &cfg)?)?;
        }
        Command::Eval { tubes, data, dets, report, tsv } => {
            let ds = open(&data)?;
            let tube_set = read_tubes(&tubes)?;
            let det_set = dets.as_deref().map(read_detections).transpose()?;
            let r = evaluate_dataset(&ds, &tube_set, det_set.as_ref())?;
            write_file(&report, r.to_text().as_bytes())?;
            if let Some(path) = tsv {
                write_file(&path, r.to_tsv().as_bytes())?;
            }
            print!("{}", r.to_text());
        }
        Command::Recall { data, k_list, thresholds } => {
            if k_list.is_empty() || thresholds.is_empty() {
                bail!("need at least one K and one threshold");
            }
            let ds = open(&data)?;
            let tubes: Vec<_> = ds.annotations.values().flatten().collect();
            let tables = recall_study(&ds.manifest.layout, &tubes, ds.manifest.num_classes(), &k_list, &thresholds)?;
            print!("{}", recall_tsv(&tables));
        }
        Command::Errors { dets, data } => {
            let ds = open(&data)?;
            let b = error_report(&ds, &read_detections(&dets)?)?;
            for f in ErrorFactor::ALL {
                println!("{}\t{:.6}", f.key(), b.share(f));
            }
            println!("E_M\t{:.6}", b.missed);
            println!("false_positives\t{}", b.false_positives);
            println!("true_positives\t{}", b.true_positives);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("ACT_THREADS") {
        let threads = match n.parse::<usize>() {
            Ok(t) if t > 0 => t,
            _ => {
                eprintln!("error: ACT_THREADS must be a positive integer, got `{n}`");
                std::process::exit(2);
            }
        };
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().expect("global pool set once");
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
