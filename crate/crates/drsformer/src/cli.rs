//! The `drsformer` command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use drsformer_core::metrics::{psnr_y, ssim_y};
use drsformer_core::network::{build_model, restore};
use drsformer_core::rain::RainPreset;
use drsformer_core::train::{Observer, Scores, StepLog, Trainer};
use drsformer_core::verify::{self, Scope};

use crate::bench::{self, BenchSpec};
use crate::checkpoint::Checkpoint;
use crate::config::{network_digest, ConfigFile, Resolved};
use crate::dataset::{parse_size, DatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::imageio::{is_image_path, load_image, save_image};
use crate::logs::{save_results, RunLog};
use crate::manifest::{Manifest, Split};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_LOG: &str = "run.log";
pub const CHECKPOINT: &str = "checkpoint.drsf";
pub const BEST: &str = "best.drsf";
pub const RESULTS: &str = "results.tsv";

#[derive(Debug, Parser)]
#[command(
    name = "drsformer",
    version,
    about = "Top-k sparse attention deraining at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize clean/rainy pairs and their manifest.
    MakeDataset(MakeDataset),
    /// Train from a config and a manifest.
    Train(Train),
    /// Restore one image or every image in a directory.
    Derain(Derain),
    /// Score restored images against the clean images of a manifest.
    Eval(EvalArgs),
    /// Finite-difference checks of the backward rules.
    Gradcheck(Gradcheck),
    /// Time dense against top-k channel attention.
    BenchAttn(BenchAttn),
}

#[derive(Debug, Args)]
pub struct MakeDataset {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// HxW, both multiples of 8.
    #[arg(long, default_value = "64x64")]
    pub size: String,
    #[arg(long, default_value = "light")]
    pub rain_preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out pairs; defaults to a tenth of the set.
    #[arg(long)]
    pub test_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Train {
    /// TOML config; unset keys fall back to the tiny preset and desk schedule.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint with optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Load a checkpoint whose architecture differs from the config.
    #[arg(long)]
    pub allow_config_mismatch: bool,
    /// Overrides `train.iterations`.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Derain {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// An image or a directory of images.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a PNG next to each PPM.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Directory holding `<name>.ppm` or `<name>.png` per pair.
    #[arg(long)]
    pub restored: PathBuf,
    /// train, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Results file; defaults to results.tsv inside the restored directory.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    /// ops, blocks or network.
    #[arg(long, default_value = "ops")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale one unit's analytic gradient to check that the suite notices.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchAttn {
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Side of the square feature map.
    #[arg(long, default_value_t = 32)]
    pub hw: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6667,0.75,0.8,1.0")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeDataset(a) => make_dataset(a),
        Command::Train(a) => train(a),
        Command::Derain(a) => derain(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::BenchAttn(a) => bench_attn(a),
    }
}

fn make_dataset(a: MakeDataset) -> Result<()> {
    let (height, width) = parse_size(&a.size)?;
    let preset: RainPreset = a.rain_preset.parse()?;
    let spec = DatasetSpec {
        count: a.count,
        width,
        height,
        rain: preset.params(0),
        test_count: a
            .test_count
            .unwrap_or_else(|| DatasetSpec::default_test_count(a.count)),
        seed: a.seed,
    };
    let manifest = spec.write(&a.out)?;
    let test = manifest.split(Split::Test).count();
    println!(
        "wrote {} train and {test} test pairs of {height}x{width} to {}",
        manifest.entries.len() - test,
        a.out.display()
    );
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn snapshot(t: &Trainer) -> Checkpoint {
    Checkpoint {
        network: t.model.config.clone(),
        iteration: t.iteration,
        params: t.model.store.clone(),
        optimizer: Some(t.state.clone()),
    }
}

struct TrainObserver {
    log: RunLog,
    best: Option<f64>,
    best_path: PathBuf,
}

impl TrainObserver {
    fn record(&mut self, trainer: &Trainer, step: &StepLog, eval: Option<&Scores>) -> Result<()> {
        self.log.step(step, eval)?;
        if let Some(s) = eval {
            eprintln!(
                "iteration {}: loss {:.5}, held-out PSNR {:.3} dB, SSIM {:.4}",
                step.iteration + 1,
                step.loss,
                s.psnr,
                s.ssim
            );
            if self.best.is_none_or(|b| s.psnr > b) {
                self.best = Some(s.psnr);
                snapshot(trainer).save(&self.best_path)?;
            }
        }
        Ok(())
    }
}

impl Observer for TrainObserver {
    fn on_step(
        &mut self,
        trainer: &Trainer,
        step: &StepLog,
        eval: Option<&Scores>,
    ) -> drsformer_core::Result<()> {
        // The core error type has no IO variant; carry the message through.
        self.record(trainer, step, eval)
            .map_err(|e| drsformer_core::Error::Config(format!("writing run outputs: {e}")))
    }
}

fn train(a: Train) -> Result<()> {
    let mut file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if a.iterations.is_some() {
        file.train.iterations = a.iterations;
    }
    if a.seed.is_some() {
        file.train.seed = a.seed;
    }
    let resolved = file.resolve()?;
    let Resolved {
        network,
        train: settings,
        ..
    } = &resolved;

    let manifest = Manifest::locate(&a.data)?;
    let train_pairs: Vec<_> = manifest
        .load_pairs(Split::Train)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let test_pairs: Vec<_> = manifest
        .load_pairs(Split::Test)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    if train_pairs.is_empty() {
        return Err(invalid(format!("{} has no train pairs", a.data.display())));
    }
    if let Some(p) = train_pairs
        .iter()
        .find(|p| p.size().0 < settings.patch || p.size().1 < settings.patch)
    {
        return Err(invalid(format!(
            "train pair of {}x{} is smaller than the {} patch",
            p.size().0,
            p.size().1,
            settings.patch
        )));
    }

    let digest = network_digest(network);
    let mut header = vec![
        "iter\tloss\tlr\tpsnr\tssim".to_string(),
        format!("architecture {}", hex(&digest)),
        format!("seed {}", settings.seed),
        format!(
            "clip {}",
            settings.clip.map_or("off".to_string(), |c| c.to_string())
        ),
    ];
    let mut trainer = match &a.resume {
        None => Trainer::new(build_model(network, settings.seed)?, settings.clone())?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if network_digest(&ck.network) != digest && !a.allow_config_mismatch {
                return Err(invalid(format!(
                    "{} was trained with a different architecture than the config; \
                     pass --allow-config-mismatch to load it anyway",
                    path.display()
                )));
            }
            let state = ck
                .optimizer
                .clone()
                .ok_or_else(|| invalid(format!("{} has no optimizer state to resume", path.display())))?;
            header.push(format!(
                "resumed from {} at iteration {}",
                path.display(),
                ck.iteration
            ));
            Trainer::resume(ck.model_for(network)?, state, ck.iteration, settings.clone())?
        }
    };

    resolved.save(&a.out.join(CONFIG_FILE))?;
    let mut observer = TrainObserver {
        log: RunLog::open(
            &a.out.join(RUN_LOG),
            a.resume.is_some() && a.out.join(RUN_LOG).exists(),
            &header,
        )?,
        best: None,
        best_path: a.out.join(BEST),
    };
    let start = Instant::now();
    let outcome = trainer.run(&train_pairs, &test_pairs, &mut observer);
    let wall = start.elapsed().as_secs_f64();
    // The trainer only advances on a successful step, so what it holds now
    // is the last good state either way.
    snapshot(&trainer).save(&a.out.join(CHECKPOINT))?;
    match outcome {
        Ok(()) => {
            observer.log.comment(&format!("wall_seconds {wall:.3}"))?;
            observer.log.flush()?;
            eprintln!("{} iterations in {wall:.1} s", trainer.iteration);
            Ok(())
        }
        Err(e) => {
            observer
                .log
                .comment(&format!("halted after iteration {}: {e}", trainer.iteration))?;
            observer.log.flush()?;
            Err(invalid(format!(
                "training halted after iteration {}: {e}; last good state saved to {}",
                trainer.iteration,
                a.out.join(CHECKPOINT).display()
            )))
        }
    }
}

fn inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    files.sort();
    Ok(files)
}

fn derain(a: Derain) -> Result<()> {
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let files = inputs(&a.input)?;
    let mut written = 0;
    for path in &files {
        let image = match load_image(path) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("warning: skipping {e}");
                continue;
            }
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let start = Instant::now();
        let out = restore(&model, &image)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        save_image(&out, &a.out.join(format!("{stem}.ppm")))?;
        if a.png {
            save_image(&out, &a.out.join(format!("{stem}.png")))?;
        }
        println!("{stem}\t{}x{}\t{ms:.1} ms", out.width(), out.height());
        written += 1;
    }
    if written == 0 {
        return Err(Error::format(&a.input, "no readable input images"));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::locate(&a.pairs)?;
    let entries: Vec<_> = match a.split.as_str() {
        "train" => manifest.split(Split::Train).collect(),
        "test" => manifest.split(Split::Test).collect(),
        "all" => manifest.entries.iter().collect(),
        s => return Err(invalid(format!("unknown split {s:?} (train, test, all)"))),
    };
    if entries.is_empty() {
        return Err(invalid(format!("no {} pairs in {}", a.split, a.pairs.display())));
    }
    let mut rows = Vec::new();
    for e in entries {
        let name = e.name();
        let restored = ["ppm", "png"]
            .iter()
            .map(|ext| a.restored.join(format!("{name}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::format(a.restored.join(format!("{name}.ppm")), "restored image missing"))?;
        let restored_path = restored;
        let restored = load_image(&restored_path)?;
        let clean = load_image(&manifest.root.join(&e.clean))?;
        if !restored.same_size(&clean) {
            return Err(Error::format(&restored_path, "size differs from the clean image"));
        }
        rows.push((
            name,
            Scores {
                psnr: psnr_y(&restored, &clean)?,
                ssim: ssim_y(&restored, &clean)?,
            },
        ));
    }
    let table = crate::logs::render_results(&rows);
    print!("name\tpsnr\tssim\n{table}");
    save_results(&a.results.unwrap_or_else(|| a.restored.join(RESULTS)), &rows)
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let scope: Scope = a.scope.parse()?;
    let report = verify::run_with(scope, a.seed, a.corrupt.as_deref())?;
    println!("unit\tchecked\tmax_rel_error\tstatus");
    for u in &report.units {
        let status = if u.passed() { "ok" } else { "FAIL" };
        println!("{}\t{}\t{:.3e}\t{status}", u.name, u.checked, u.max_rel_error);
    }
    let failed: Vec<&str> = report
        .units
        .iter()
        .filter(|u| !u.passed())
        .map(|u| u.name.as_str())
        .collect();
    println!(
        "{} units, worst {:.3e}, threshold {:.0e}",
        report.units.len(),
        report.max_rel_error(),
        verify::THRESHOLD
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )))
    }
}

fn bench_attn(a: BenchAttn) -> Result<()> {
    let rows = bench::run(&BenchSpec {
        channels: a.channels,
        heads: a.heads,
        hw: a.hw,
        ratios: a.ratios,
        reps: a.reps,
        seed: a.seed,
    })?;
    print!("{}", bench::render(&rows));
    match rows.iter().find(|r| !r.passed()) {
        None => Ok(()),
        Some(r) => Err(Error::Verification(format!(
            "ratio 1 output deviates from dense attention by {:.3e}",
            r.deviation
        ))),
    }
}
