use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use vad_core::attention::AttentionKind;
use vad_core::checkpoint::Checkpoint;
use vad_core::dataprep::{
    self, energy_label, mix_at_snr, read_labels, synth_one, write_labels, ImbalanceCondition, Manifest, ManifestEntry,
    Split,
};
use vad_core::dataset::{self, Utterance};
use vad_core::eval::{self, dump_hidden_maps};
use vad_core::features::{apply_norm, logmel, read_wav, write_feature_cache, write_wav, AudioClip};
use vad_core::loss::LossKind;
use vad_core::model::Model;
use vad_core::rng;
use vad_core::trainer::{train, TrainOutputs};

use crate::config::RunConfig;
use crate::{CliError, Command, Overrides};

type Result<T> = std::result::Result<T, CliError>;

fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &o.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("seed", o.seed.map(|v| v.to_string())),
        ("attention", o.attention.clone()),
        ("hidden", o.hidden.map(|v| v.to_string())),
        ("loss", o.loss.clone()),
        ("gamma", o.gamma.map(|v| v.to_string())),
        ("condition", o.condition.clone()),
        ("snr_set", o.snr_set.clone()),
        ("jobs", o.jobs.map(|v| v.to_string())),
        ("data", o.data.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)
                .map_err(|e| CliError::Usage(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
    }
    if o.gamma.is_some() && o.loss.is_none() {
        cfg.loss = "fl".into();
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn run_dir(o: &Overrides, cfg: &RunConfig) -> PathBuf {
    o.out.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn required_out(o: &Overrides, what: &str) -> Result<PathBuf> {
    o.out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{what} needs --out")))
}

pub struct Corpus {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Loads `cfg.data` when set, else synthesizes the configured corpus in
/// memory.
pub fn corpus(cfg: &RunConfig, condition: ImbalanceCondition) -> Result<Corpus> {
    let all = if cfg.data.is_empty() {
        let synth = dataprep::SynthConfig {
            condition,
            ..cfg.synth()
        };
        let utts = (0..synth.n_utts())
            .map(|i| synth_one(cfg.seed, &synth, i))
            .collect::<vad_core::Result<Vec<_>>>()?;
        dataset::from_synth(&utts)?
    } else {
        let manifest = Manifest::load(&cfg.data)?;
        dataset::load(&manifest, &[Split::Train, Split::Val, Split::Test])?
    };
    Ok(Corpus {
        train: dataset::of_split(&all, Split::Train),
        val: dataset::of_split(&all, Split::Val),
        test: dataset::of_split(&all, Split::Test),
    })
}

pub fn run(command: Command, o: &Overrides) -> Result<()> {
    let cfg = resolve(o)?;
    match command {
        Command::Synth => synth(o, &cfg),
        Command::Featurize { manifest } => featurize(o, &manifest),
        Command::Label { wavs } => label(o, &wavs),
        Command::Prep { manifest, noise } => prep(o, &cfg, &manifest, &noise),
        Command::Train => train_cmd(o, &cfg),
        Command::Eval { checkpoint } => eval_cmd(o, &cfg, &checkpoint),
        Command::Infer { checkpoint, wav } => infer(o, &checkpoint, &wav),
        Command::DumpAttn {
            checkpoint,
            wav,
            labels,
            start,
            end,
        } => dump_attn(o, &checkpoint, &wav, labels.as_deref(), start, end),
        Command::ParamCount => param_count(&cfg),
        Command::Sweep => sweep(o, &cfg),
    }
}

fn synth(o: &Overrides, cfg: &RunConfig) -> Result<()> {
    let out = required_out(o, "synth")?;
    let manifest = dataprep::synth_corpus(cfg.seed, &cfg.synth(), &out)?;
    cfg.write(&out)?;
    println!("{} utterances written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn featurize(o: &Overrides, manifest_path: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let out = o.out.clone().unwrap_or_else(|| manifest.root.join("feats"));
    mkdir(&out)?;
    for e in &manifest.entries {
        let features = logmel(&read_wav(manifest.resolve(&e.wav_path))?)?;
        write_feature_cache(out.join(format!("{}.feat", e.utt_id)), &features)?;
    }
    println!("{} feature files written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn label(o: &Overrides, wavs: &[PathBuf]) -> Result<()> {
    if let Some(out) = &o.out {
        mkdir(out)?;
    }
    for wav in wavs {
        let labels = energy_label(&read_wav(wav)?);
        let path = match &o.out {
            Some(dir) => dir.join(wav.with_extension("lab").file_name().unwrap_or_default()),
            None => wav.with_extension("lab"),
        };
        write_labels(&path, &labels)?;
        println!("{}: {} frames", path.display(), labels.len());
    }
    Ok(())
}

/// Repeats `clip` until it has at least `n` samples.
fn tile(clip: &AudioClip, n: usize) -> AudioClip {
    let samples = clip.samples.iter().copied().cycle().take(n.max(clip.len())).collect();
    AudioClip::new(samples)
}

fn prep(o: &Overrides, cfg: &RunConfig, manifest_path: &Path, noise_files: &[PathBuf]) -> Result<()> {
    let out = required_out(o, "prep")?;
    let clean = Manifest::load(manifest_path)?;
    let noises = noise_files
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            read_wav(p).map(|clip| (stem, clip))
        })
        .collect::<vad_core::Result<Vec<_>>>()?;
    for sub in ["wav", "labels"] {
        mkdir(&out.join(sub))?;
    }
    let mut entries = Vec::with_capacity(clean.entries.len());
    for (i, e) in clean.entries.iter().enumerate() {
        let clip = read_wav(clean.resolve(&e.wav_path))?;
        let labels = read_labels(clean.resolve(&e.label_path))?;
        let (clip, labels) = cfg.condition.apply(&clip, &labels)?;
        let mut r = rng::seeded(rng::derive_seed(cfg.seed, i as u64));
        let (noise_name, noise) = if noises.is_empty() {
            let kind = cfg.noise_types[i % cfg.noise_types.len()];
            (kind.to_string(), kind.generate(clip.len(), &mut r))
        } else {
            let (name, n) = &noises[i % noises.len()];
            (name.clone(), tile(n, clip.len()))
        };
        let snr = cfg.snr_set[(i / cfg.noise_types.len().max(1)) % cfg.snr_set.len()];
        let mixed = mix_at_snr(&clip, &noise, snr, &mut r)?;
        let entry = ManifestEntry {
            wav_path: format!("wav/{}.wav", e.utt_id),
            label_path: format!("labels/{}.lab", e.utt_id),
            noise_type: noise_name,
            snr_db: snr,
            condition: cfg.condition.to_string(),
            ..e.clone()
        };
        write_wav(out.join(&entry.wav_path), &mixed.clip)?;
        write_labels(out.join(&entry.label_path), &labels)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        root: out.clone(),
        entries,
    };
    manifest.save(out.join("manifest.csv"))?;
    cfg.write(&out)?;
    println!("{} utterances prepared in {}", manifest.entries.len(), out.display());
    Ok(())
}

fn train_cmd(o: &Overrides, cfg: &RunConfig) -> Result<()> {
    let dir = run_dir(o, cfg);
    for sub in ["checkpoint", "logs", "reports"] {
        mkdir(&dir.join(sub))?;
    }
    cfg.write(&dir)?;
    let data = corpus(cfg, cfg.condition)?;
    let outputs = TrainOutputs {
        checkpoint: Some(dir.join("checkpoint").join("best.ckpt")),
        log: Some(dir.join("logs").join("train_log.csv")),
        jobs: cfg.jobs,
    };
    let result = train(&cfg.model(), &cfg.train()?, &data.train, &data.val, &outputs)?;
    println!(
        "best validation AUC {:.4} after {} epochs; checkpoint {}",
        result.best_val_auc.unwrap_or(f64::NAN),
        result.log.epochs.len(),
        dir.join("checkpoint").join("best.ckpt").display()
    );
    Ok(())
}

fn eval_cmd(o: &Overrides, cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let out = match &o.out {
        Some(dir) => dir.clone(),
        None => checkpoint
            .parent()
            .and_then(Path::parent)
            .map(|run| run.join("reports"))
            .unwrap_or_else(|| PathBuf::from("reports")),
    };
    mkdir(&out)?;
    let test = corpus(cfg, cfg.condition)?.test;
    if test.is_empty() {
        return Err(CliError::Core(vad_core::Error::Data("test split is empty".into())));
    }
    let test = dataset::normalized(&ck.norm, &test)?;
    let report = eval::evaluate(&ck.model, &test, cfg.jobs)?;
    report.write(&out)?;
    cfg.write(&out)?;
    print!("{}", report.summary());
    Ok(())
}

fn normalized_features(ck: &Checkpoint, wav: &Path) -> Result<(AudioClip, vad_core::Tensor)> {
    let clip = read_wav(wav)?;
    let features = apply_norm(&ck.norm, &logmel(&clip)?)?;
    Ok((clip, features))
}

fn infer(o: &Overrides, checkpoint: &Path, wav: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (_, features) = normalized_features(&ck, wav)?;
    let probs = ck.model.predict(&features)?;
    let mut body = String::with_capacity(probs.len() * 10);
    for p in &probs {
        let _ = writeln!(body, "{p:.6}");
    }
    match &o.out {
        Some(path) => write_file(path, &body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn dump_attn(
    o: &Overrides,
    checkpoint: &Path,
    wav: &Path,
    labels: Option<&Path>,
    start: usize,
    end: usize,
) -> Result<()> {
    let out = required_out(o, "dump-attn")?;
    let ck = Checkpoint::load(checkpoint)?;
    let (clip, features) = normalized_features(&ck, wav)?;
    let labels = match labels {
        Some(p) => read_labels(p)?,
        None => energy_label(&clip),
    };
    let dump = dump_hidden_maps(&ck.model, &features, &labels, start, end)?;
    mkdir(&out)?;
    dump.write(&out)?;
    println!("frames {start}..{end} written to {}", out.display());
    Ok(())
}

fn param_count(cfg: &RunConfig) -> Result<()> {
    let model = Model::build(cfg.model(), cfg.seed)?;
    let counts = model.count_params();
    let mut table = String::new();
    for (i, n) in counts.lstm.iter().enumerate() {
        let _ = writeln!(table, "{:<16}{n:>8}", format!("lstm{}", i + 1));
    }
    if cfg.attention != AttentionKind::None {
        let _ = writeln!(
            table,
            "{:<16}{:>8}",
            format!("attention ({})", cfg.attention),
            counts.attention
        );
    }
    let _ = writeln!(table, "{:<16}{:>8}", "head", counts.head);
    let _ = writeln!(table, "{:<16}{:>8}", "total", counts.total());
    if cfg.attention != AttentionKind::None {
        let _ = writeln!(table, "{:<16}{:>7.2}%", "overhead", counts.overhead_percent());
    }
    print!("{table}");
    Ok(())
}

#[derive(Clone, Debug)]
struct SweepRow {
    condition: ImbalanceCondition,
    attention: AttentionKind,
    loss: LossKind,
    val_auc: f64,
    test_auc: f64,
    epochs: usize,
}

/// The γ grid with the CE row (γ = 0) first and duplicates removed.
fn gamma_grid(gammas: &[f64]) -> Vec<f64> {
    let mut grid = vec![0.0];
    for &g in gammas {
        if !grid.contains(&g) {
            grid.push(g);
        }
    }
    grid
}

fn sweep(o: &Overrides, cfg: &RunConfig) -> Result<()> {
    let dir = run_dir(o, cfg);
    mkdir(&dir)?;
    cfg.write(&dir)?;
    let losses = gamma_grid(&cfg.gammas)
        .into_iter()
        .map(LossKind::from_gamma)
        .collect::<vad_core::Result<Vec<_>>>()?;
    let corpora = cfg
        .conditions
        .iter()
        .map(|&c| corpus(cfg, c))
        .collect::<Result<Vec<_>>>()?;
    let mut grid = Vec::new();
    for (ci, &condition) in cfg.conditions.iter().enumerate() {
        for &loss in &losses {
            for attention in [AttentionKind::None, AttentionKind::Da2] {
                grid.push((ci, condition, loss, attention));
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let run_one = |&(ci, condition, loss, attention): &(usize, ImbalanceCondition, LossKind, AttentionKind)| {
        let data: &Corpus = &corpora[ci];
        let model = RunConfig {
            attention,
            ..cfg.clone()
        }
        .model();
        let train_cfg = vad_core::trainer::TrainConfig { loss, ..cfg.train()? };
        let r = train(&model, &train_cfg, &data.train, &data.val, &TrainOutputs::default())?;
        let test = dataset::normalized(&r.best.norm, &data.test)?;
        let report = eval::evaluate(&r.best.model, &test, 1)?;
        log::info!("{condition} {attention} {loss}: test AUC {:.4}", report.overall);
        Ok(SweepRow {
            condition,
            attention,
            loss,
            val_auc: r.best_val_auc.unwrap_or(f64::NAN),
            test_auc: report.overall,
            epochs: r.log.epochs.len(),
        })
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.clamp(1, grid.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = grid.get(i) else { break };
                let row = run_one(job);
                results.lock().expect("sweep worker panicked")[i] = Some(row);
            });
        }
    });

    let mut csv = String::from("condition,attention,loss,gamma,val_auc,test_auc,epochs\n");
    for row in results.into_inner().expect("sweep worker panicked") {
        let row = row.expect("every grid cell is visited")?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.condition,
            row.attention,
            row.loss,
            row.loss.gamma(),
            row.val_auc,
            row.test_auc,
            row.epochs
        );
    }
    write_file(&dir.join("results.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_grid_always_has_the_ce_row() {
        assert_eq!(gamma_grid(&[0.8]), vec![0.0, 0.8]);
        assert_eq!(gamma_grid(&[0.0, 0.8, 0.8]), vec![0.0, 0.8]);
    }

    #[test]
    fn tiling_repeats_short_noise() {
        let t = tile(&AudioClip::new(vec![1.0, 2.0]), 5);
        assert_eq!(t.samples, vec![1.0, 2.0, 1.0, 2.0, 1.0]);
    }
}
