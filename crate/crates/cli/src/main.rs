use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dualmask::config::RunConfig;
use dualmask::curriculum::TraceRow;
use dualmask::dfgn::{read_checkpoint, DenoiserParams};
use dualmask::masks::{bits_from_string, condense_to, ConditionMask, Task};
use dualmask::numcore::Tensor;
use dualmask::pipeline::{
    ablate, curriculum_trace, evaluate, generate_clip, make_splits, write_train_log, Trainer,
    ABLATION_HEADER, EVAL_HEADER,
};
use dualmask::spritegen::{self, factors_of_caption, read_dataset, read_frame, vocab, write_dataset, SpriteClip};

#[derive(Parser)]
#[command(name = "dualmask", version, about = "Dual-mask curriculum training for toy sprite diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (for `eval`, the evaluation seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; tables go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out sprite splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a denoiser, writing a per-step log and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps (default: train.steps).
        #[arg(long)]
        until: Option<usize>,
    },
    /// Generate one clip from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Dataset directory holding the guidance clip.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        clip_id: Option<String>,
        /// Comma-separated caption words, e.g. `red,circle,bounce` (GRT).
        #[arg(long)]
        caption: Option<String>,
        /// Reference frame as a portable pixmap (GRT).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Explicit keep pattern such as `10001`; drawn at random otherwise.
        #[arg(long)]
        mask: Option<String>,
    },
    /// Score a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the temporal-layer by curriculum grid and tabulate medians.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Dump the curriculum scheduler trace.
    InspectCurriculum {
        #[command(flatten)]
        common: Common,
        /// One loss per line (or a train log CSV); synthetic losses otherwise.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<dualmask::Error> for Failure {
    fn from(e: dualmask::Error) -> Self {
        match e {
            dualmask::Error::Config { .. } => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Usage(e.into()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Like [`load_config`], falling back to the `config.txt` that `train` wrote
/// beside (or one level above) the checkpoint.
fn config_for_checkpoint(common: &Common, checkpoint: &Path) -> CliResult<RunConfig> {
    if common.config.is_some() {
        return load_config(common);
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let found = [dir.join("config.txt"), dir.join("..").join("config.txt")]
        .into_iter()
        .find(|p| p.is_file());
    let with = Common {
        config: found,
        ..common.clone()
    };
    load_config(&with)
}

fn out_dir(common: &Common) -> CliResult<Option<&Path>> {
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(common.out.as_deref())
}

/// Writes `text` to `<out>/<name>` when an output directory is set, else stdout.
fn emit(out: Option<&Path>, name: &str, text: &str) -> CliResult<()> {
    match out {
        Some(dir) => {
            let path = dir.join(name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            std::io::stdout().write_all(text.as_bytes()).context("writing stdout")?;
        }
    }
    Ok(())
}

fn load_params(cfg: &RunConfig, checkpoint: &Path) -> CliResult<DenoiserParams> {
    Ok(read_checkpoint(checkpoint)?.into_params(&cfg.model)?)
}

fn gen_data(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?.ok_or_else(|| usage("gen-data needs --out"))?;
    let (train, heldout) = make_splits(&cfg)?;
    write_dataset(&train, &out.join("train"))?;
    write_dataset(&heldout, &out.join("heldout"))?;
    let mut text = String::from("split,clip_id,frames,factors\n");
    for (split, ds) in [("train", &train), ("heldout", &heldout)] {
        for r in &ds.manifest.records {
            text.push_str(&format!("{split},{},{},{}\n", r.clip_id, r.frame_count, r.factors));
        }
    }
    print!("{text}");
    Ok(())
}

fn train(common: &Common, data: &Path, resume: Option<&Path>, until: Option<usize>) -> CliResult<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?.ok_or_else(|| usage("train needs --out"))?;
    let dataset = read_dataset(&data.join("train"))?;
    if dataset.clips.is_empty() {
        return Err(Failure::Runtime(anyhow!("training split in {} is empty", data.display())));
    }
    fs::write(out.join("config.txt"), cfg.to_text()).context("writing config.txt")?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).context("creating checkpoint directory")?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&cfg, path)?,
        None => Trainer::new(&cfg)?,
    };
    let log_path = out.join("train_log.csv");
    let start = trainer.step;
    trainer.run(&dataset.clips, until.unwrap_or(cfg.train.steps), Some(&ckpt_dir))?;
    write_train_log(&log_path, &trainer.log, resume.is_some())?;
    trainer.save(&out.join("model.ckpt"))?;
    println!("steps,first_step,last_loss,checkpoint");
    println!(
        "{},{},{:?},{}",
        trainer.step - start,
        start,
        trainer.log.last().map_or(f64::NAN, |r| r.loss),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn parse_caption(text: &str) -> CliResult<Vec<usize>> {
    let tokens = text
        .split(',')
        .map(|w| {
            let w = w.trim().to_ascii_lowercase();
            vocab::id(&w).ok_or_else(|| usage(format!("unknown caption word `{w}`")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    factors_of_caption(&tokens).map_err(|e| usage(e.to_string()))?;
    Ok(tokens)
}

struct SampleArgs<'a> {
    checkpoint: &'a Path,
    task: &'a str,
    data: Option<&'a Path>,
    clip_id: Option<&'a str>,
    caption: Option<&'a str>,
    reference: Option<&'a Path>,
    mask: Option<&'a str>,
}

fn guidance_clip(cfg: &RunConfig, args: &SampleArgs, task: Task, rng: &mut ChaCha8Rng) -> CliResult<SpriteClip> {
    let frames = cfg.eval.frames;
    let from_data = match (args.data, args.clip_id) {
        (Some(dir), Some(id)) => {
            let ds = read_dataset(dir)?;
            let idx = ds
                .manifest
                .records
                .iter()
                .position(|r| r.clip_id == id)
                .ok_or_else(|| usage(format!("clip `{id}` not in {}", dir.display())))?;
            let clip = ds.clips[idx].clone();
            Some(if clip.frame_count() > frames {
                condense_to(&clip, frames, rng)?.0
            } else {
                clip
            })
        }
        (None, None) => None,
        _ => return Err(usage("--data and --clip-id go together")),
    };
    if task != Task::Grt {
        let clip = from_data.ok_or_else(|| usage(format!("{task} needs a guidance clip (--data, --clip-id)")))?;
        if clip.frame_count() != frames {
            return Err(usage(format!(
                "guidance clip has {} frames; {task} sampling needs {frames}",
                clip.frame_count()
            )));
        }
        return Ok(clip);
    }
    let (h, w, c) = (cfg.data.height, cfg.data.width, cfg.data.channels);
    let reference = match (args.reference, &from_data) {
        (Some(path), _) => {
            let (rh, rw, rc, values) = read_frame(path)?;
            if (rh, rw, rc) != (h, w, c) {
                return Err(usage(format!(
                    "reference is {rh}x{rw}x{rc}, model expects {h}x{w}x{c}"
                )));
            }
            values
        }
        (None, Some(clip)) => clip.frame(0).to_vec(),
        (None, None) => return Err(usage("GRT needs --reference or a guidance clip")),
    };
    let caption = match (args.caption, &from_data) {
        (Some(text), _) => parse_caption(text)?,
        (None, Some(clip)) => clip.caption.clone(),
        (None, None) => return Err(usage("GRT needs --caption or a guidance clip")),
    };
    let factors = factors_of_caption(&caption).map_err(|e| usage(e.to_string()))?;
    let mut data = reference;
    data.resize(frames * h * w * c, 0.0);
    Ok(SpriteClip {
        frames: Tensor::new(vec![frames, h, w, c], data)?,
        caption,
        factors,
    })
}

fn sample(common: &Common, args: SampleArgs) -> CliResult<()> {
    let cfg = config_for_checkpoint(common, args.checkpoint)?;
    let out = out_dir(common)?.ok_or_else(|| usage("sample needs --out"))?;
    let task: Task = args.task.parse().map_err(|e: dualmask::Error| usage(e.to_string()))?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = guidance_clip(&cfg, &args, task, &mut rng)?;
    let n = clip.frame_count();
    let cmask = match args.mask {
        Some(bits) => {
            let keep = bits_from_string(bits).map_err(|e| usage(e.to_string()))?;
            if keep.len() != n {
                return Err(usage(format!("mask has {} frames, clip has {n}", keep.len())));
            }
            ConditionMask::from_keep(task, keep).map_err(|e| usage(e.to_string()))?
        }
        None => dualmask::masks::make_condition_mask(task, n, &mut rng)?,
    };
    let params = load_params(&cfg, args.checkpoint)?;
    let schedule = cfg.schedule()?;
    let frames = generate_clip(&params, &schedule, cfg.diffusion.sample_steps, &clip, &cmask, &mut rng)?;
    let (h, w, c) = (cfg.data.height, cfg.data.width, cfg.data.channels);
    let per = h * w * c;
    for f in 0..n {
        let path = out.join(format!("sample_{f:03}.ppm"));
        spritegen::write_frame(&path, &frames.data()[f * per..(f + 1) * per], h, w, c)?;
    }
    let line = format!(
        "sample\t{n}\t{task}\t{}\t{}\t{seed}\n",
        cmask.to_bit_string(),
        clip.caption.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    );
    fs::write(
        out.join("manifest.tsv"),
        format!("# prefix\tframes\ttask\tkeep\tcaption\tseed\n{line}"),
    )
    .context("writing sample manifest")?;
    println!("prefix,frames,task,keep,seed");
    println!("sample,{n},{task},{},{seed}", cmask.to_bit_string());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, data: &Path) -> CliResult<()> {
    let mut cfg = config_for_checkpoint(common, checkpoint)?;
    if let Some(seed) = common.seed {
        cfg.eval.seed = seed;
    }
    let out = out_dir(common)?;
    let params = load_params(&cfg, checkpoint)?;
    let heldout = read_dataset(&data.join("heldout"))?;
    let rows = evaluate(&params, &cfg, &heldout.clips)?;
    let mut text = format!("{EVAL_HEADER}\n");
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    emit(out, "eval.csv", &text)
}

fn run_ablation(common: &Common, seeds: &[u64]) -> CliResult<()> {
    let cfg = load_config(common)?;
    if seeds.is_empty() {
        return Err(usage("--seeds must list at least one seed"));
    }
    let out = out_dir(common)?;
    let cells = ablate(&cfg, seeds)?;
    let mut text = format!("{ABLATION_HEADER}\n");
    for c in &cells {
        text.push_str(&c.to_csv());
        text.push('\n');
    }
    emit(out, "ablation.csv", &text)
}

fn read_losses(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let column = match lines.peek() {
        Some(first) if first.starts_with("step,") => {
            let col = first.split(',').position(|c| c == "L_c").ok_or_else(|| usage("log has no L_c column"))?;
            lines.next();
            Some(col)
        }
        _ => None,
    };
    lines
        .enumerate()
        .map(|(i, l)| {
            let field = match column {
                Some(c) => l.split(',').nth(c).unwrap_or(""),
                None => l.trim(),
            };
            field
                .trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("{}: line {} is not a loss", path.display(), i + 1)))
        })
        .collect()
}

fn inspect(common: &Common, losses: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let losses = losses.map(read_losses).transpose()?;
    let rows = curriculum_trace(&cfg, losses.as_deref())?;
    let mut text = format!("{}\n", TraceRow::HEADER);
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    emit(out, "curriculum.csv", &text)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData { common } => gen_data(common),
        Command::Train {
            common,
            data,
            resume,
            until,
        } => train(common, data, resume.as_deref(), *until),
        Command::Sample {
            common,
            checkpoint,
            task,
            data,
            clip_id,
            caption,
            reference,
            mask,
        } => sample(
            common,
            SampleArgs {
                checkpoint,
                task,
                data: data.as_deref(),
                clip_id: clip_id.as_deref(),
                caption: caption.as_deref(),
                reference: reference.as_deref(),
                mask: mask.as_deref(),
            },
        ),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => eval(common, checkpoint, data),
        Command::Ablate { common, seeds } => run_ablation(common, seeds),
        Command::InspectCurriculum { common, losses } => inspect(common, losses.as_deref()),
    }
}

/// Error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text.push_str(": ");
            text.push_str(&c);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
