use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    ConfigArgs, EvaluateArgs, GenMasksArgs, InferArgs, OverlayArgs, PartialFailure, PhantomArgs, RefineArgs,
    TrainArgs,
};
use crate::config::PipelineConfig;
use crate::cosegnet::{
    read_checkpoint, write_checkpoint, AttentionConfig, ChannelAttention, Checkpoint, CoSegNet, EncoderConfig,
    ModelConfig, OPTIMIZER_PREFIX,
};
use crate::dataset::imageio::{load_image, load_mask, load_raw, save_image_png16, save_mask, save_raw};
use crate::dataset::{
    build_pairs, covering_pairs, load_records, preprocess, stratified_split, write_records, LesionRecord,
    PreprocessConfig, Split,
};
use crate::densecrf::refine_with;
use crate::metrics::evaluate_set;
use crate::parallel::Exec;
use crate::phantom::PhantomSpec;
use crate::pseudomask::generate_pseudo_mask;
use crate::training::{LossLog, OptimizerState, Sample, TrainConfig, TrainState, Trainer};
use crate::{Error, Result};

/// Distance of phantom RECIST endpoints inside the lesion boundary, in pixels.
/// Keeps the dilated definite-foreground strip within the lesion.
pub const PHANTOM_RECIST_INSET: f64 = 2.5;

/// Radius range (in 64-pixel units) of each phantom cluster, cycled.
const CLUSTER_RADII: [(f64, f64); 4] = [(5.0, 7.0), (7.0, 9.0), (9.0, 11.0), (11.0, 13.0)];

/// Pipeline settings sized for phantom datasets of side `size`.
pub fn phantom_pipeline_config(size: usize, clusters: usize, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.dataset.num_clusters = clusters;
    cfg.dataset.rng_seed = seed;
    cfg.preprocess.target_size = size;
    cfg.grabcut.rng_seed = seed;
    cfg.model = ModelConfig {
        input_size: size,
        encoder: EncoderConfig { stage_channels: vec![8, 16, 16, 32], units_per_stage: 1, ..Default::default() },
        attention: AttentionConfig { channel: ChannelAttention::Se, se_reduction: 4, ..Default::default() },
        init_seed: seed,
        ..Default::default()
    };
    cfg.train = TrainConfig {
        pairs_per_batch: 4,
        epochs: 1,
        iters_per_epoch: 3000,
        rng_seed: seed,
        checkpoint_every: 500,
    };
    cfg.optimizer.sgd_lr0 = 0.01;
    cfg.optimizer.momentum = 0.9;
    cfg
}

pub fn phantom(a: &PhantomArgs) -> anyhow::Result<()> {
    if a.count == 0 || a.clusters == 0 || a.lesions_per_patient == 0 {
        return Err(Error::Config("count, clusters and lesions-per-patient must be >= 1".into()).into());
    }
    if a.size < 32 || a.size % 8 != 0 {
        return Err(Error::Config(format!("size {} must be a multiple of 8 and >= 32", a.size)).into());
    }
    if !(a.noise >= 0.0) {
        return Err(Error::Config("noise must be >= 0".into()).into());
    }
    let images = a.out.join("images");
    let gt = a.out.join("gt");
    for d in [&images, &gt] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let scale = a.size as f64 / 64.0;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut records = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let patient = i / a.lesions_per_patient;
        let cluster = patient % a.clusters;
        let (r0, r1) = CLUSTER_RADII[cluster % CLUSTER_RADII.len()];
        let mut spec = PhantomSpec::random(&mut rng, a.size, (r0 * scale, r1 * scale), 4.0 * scale);
        spec.noise_sd = a.noise;
        spec.recist_inset = PHANTOM_RECIST_INSET;
        spec.fg_hu = 200.0 - 15.0 * (cluster % CLUSTER_RADII.len()) as f64;
        let ph = spec.render(&mut rng);
        let id = format!("L{i:04}");
        let rel = format!("images/{id}.png");
        save_image_png16(&a.out.join(&rel), &ph.image)?;
        save_mask(&gt.join(format!("{id}.png")), &ph.mask)?;
        records.push(LesionRecord {
            lesion_id: id,
            patient_id: format!("P{patient:04}"),
            image_path: rel,
            recist: ph.recist,
            cluster_id: cluster,
            split: Split::Unassigned,
        });
    }
    write_records(&a.out.join("lesions.csv"), &records)?;
    let cfg_path = a.out.join("pipeline.toml");
    if !cfg_path.exists() {
        let text = phantom_pipeline_config(a.size, a.clusters, a.seed).to_toml()?;
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    }
    info!("wrote {} phantom lesions to {}", a.count, a.out.display());
    Ok(())
}

fn load_config(c: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(d) = &c.dataset {
        cfg.paths.dataset = d.clone();
    }
    if let Some(w) = &c.work_dir {
        cfg.paths.work_dir = w.clone();
    }
    Ok(cfg)
}

fn image_path(dataset: &Path, record: &LesionRecord) -> PathBuf {
    let p = Path::new(&record.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dataset.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn gen_masks(a: &GenMasksArgs, exec: Exec) -> anyhow::Result<()> {
    let cfg = load_config(&a.common)?;
    cfg.validate()?;
    let records = load_records(&cfg.paths.dataset)?;
    let masks = cfg.masks_dir();
    create_dir(&masks)?;
    let results = exec.map(&records, |r| -> Result<PathBuf> {
        let img = load_image(&image_path(&cfg.paths.dataset, r))?;
        let pm = generate_pseudo_mask(&img, &r.recist, &cfg.preprocess, &cfg.grabcut)?;
        let out = masks.join(format!("{}.png", r.lesion_id));
        save_mask(&out, &pm.mask)?;
        Ok(out)
    });
    let manifest = cfg.manifest_path();
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Csv { path: manifest.clone(), source: e })?;
    w.write_record(["lesion_id", "mask_path"]).context("writing manifest")?;
    let mut failures = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(p) => {
                let rel = p.strip_prefix(&cfg.paths.work_dir).unwrap_or(&p);
                w.write_record([r.lesion_id.as_str(), &rel.to_string_lossy()]).context("writing manifest")?;
            }
            Err(e) => {
                warn!("{}: {e}", r.lesion_id);
                failures.push(format!("{}: {e}", r.lesion_id));
            }
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    info!("{} of {} pseudo-masks written to {}", records.len() - failures.len(), records.len(), masks.display());
    if !failures.is_empty() {
        return Err(PartialFailure(format!(
            "{} of {} records failed:\n  {}",
            failures.len(),
            records.len(),
            failures.join("\n  ")
        ))
        .into());
    }
    Ok(())
}

fn read_manifest(cfg: &PipelineConfig) -> anyhow::Result<HashMap<String, PathBuf>> {
    let path = cfg.manifest_path();
    if !path.exists() {
        bail!("no pseudo-mask manifest at {}; run `lseg gen-masks` first", path.display());
    }
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::Csv { path: path.clone(), source: e })?;
    let mut out = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Csv { path: path.clone(), source: e })?;
        if row.len() != 2 {
            bail!("{}: expected `lesion_id,mask_path` rows", path.display());
        }
        out.insert(row[0].to_string(), cfg.paths.work_dir.join(&row[1]));
    }
    Ok(out)
}

/// Records with their split assigned from the config.
fn split_records(cfg: &PipelineConfig) -> Result<Vec<LesionRecord>> {
    let mut records = load_records(&cfg.paths.dataset)?;
    stratified_split(&mut records, &cfg.dataset)?;
    Ok(records)
}

fn normalized_image(cfg: &PipelineConfig, r: &LesionRecord) -> Result<Array2<f64>> {
    let img = load_image(&image_path(&cfg.paths.dataset, r))?;
    Ok(preprocess(&img, &cfg.preprocess)?.image)
}

/// Index pairs into `ids` for the given lesion pairs.
fn index_pairs(ids: &[&str], pairs: &[crate::dataset::LesionPair]) -> Vec<(usize, usize)> {
    let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    pairs.iter().map(|p| (pos[p.a.as_str()], pos[p.b.as_str()])).collect()
}

pub fn train(a: &TrainArgs, exec: Exec) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.iters_per_epoch {
        cfg.train.iters_per_epoch = v;
    }
    if let Some(v) = a.pairs_per_batch {
        cfg.train.pairs_per_batch = v;
    }
    if let Some(v) = a.seed {
        cfg.train.rng_seed = v;
    }
    cfg.validate()?;
    let records = split_records(&cfg)?;
    let manifest = read_manifest(&cfg)?;
    let train: Vec<&LesionRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let missing: Vec<&str> =
        train.iter().filter(|r| !manifest.contains_key(&r.lesion_id)).map(|r| r.lesion_id.as_str()).collect();
    if !missing.is_empty() {
        bail!(
            "{} training lesions have no pseudo-mask (first: {}); rerun `lseg gen-masks`",
            missing.len(),
            missing[0]
        );
    }
    let samples = exec
        .map(&train, |r| -> Result<Sample> {
            let img = normalized_image(&cfg, r)?;
            let mask = load_mask(&manifest[&r.lesion_id])?;
            Sample::new(&img, &mask)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = train.iter().map(|r| r.lesion_id.as_str()).collect();
    let pairs = index_pairs(&ids, &build_pairs(&records, Split::Train, &cfg.dataset));
    info!("{} training lesions, {} pairs", samples.len(), pairs.len());

    create_dir(&cfg.paths.work_dir)?;
    let ck_path = cfg.checkpoint_path();
    let (mut model, state) = if a.resume && ck_path.exists() {
        let ck = read_checkpoint(&ck_path)?;
        let next_iter = ck.meta["next_iter"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks next_iter".into()))?
            as usize;
        if ck.config != cfg.model {
            warn!("checkpoint model config differs from {}; using the checkpoint's", a.common.config.display());
        }
        let (model, extra) = ck.into_model()?;
        let optimizer = OptimizerState::from_named(cfg.optimizer.kind, model.params(), OPTIMIZER_PREFIX, &extra)?;
        info!("resuming at iteration {next_iter}");
        (model, Some(TrainState { next_iter, optimizer }))
    } else {
        if a.resume {
            warn!("no checkpoint at {}; starting from scratch", ck_path.display());
        }
        (CoSegNet::new(cfg.model.clone())?, None)
    };
    let mut log = LossLog::open(&cfg.loss_log_path(), state.is_some())?;
    let total = cfg.train.total_iters();
    let every = cfg.train.checkpoint_every;
    let save = |model: &CoSegNet, st: &TrainState| -> Result<()> {
        let ck = Checkpoint::from_model(
            model,
            serde_json::json!({ "next_iter": st.next_iter, "total_iters": total }),
            st.optimizer.to_named(model.params(), OPTIMIZER_PREFIX),
        );
        write_checkpoint(&ck_path, &ck)
    };
    let trainer = Trainer { opt: &cfg.optimizer, tc: &cfg.train, exec };
    let start = state.as_ref().map_or(0, |s| s.next_iter);
    let final_state = trainer.run(&mut model, &samples, &pairs, state, &mut |rec, model, st| {
        log.write(rec)?;
        if rec.iter % 50 == 0 || rec.iter + 1 == total {
            info!("iter {:>6}  lr {:.3e}  loss {:.5}", rec.iter, rec.lr, rec.loss);
        }
        if every > 0 && st.next_iter % every == 0 {
            save(model, st)?;
        }
        Ok(())
    })?;
    save(&model, &final_state)?;
    info!(
        "trained iterations {start}..{}; checkpoint {}",
        final_state.next_iter,
        ck_path.display()
    );
    Ok(())
}

fn read_pair_list(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        if row.len() != 2 {
            bail!("{}: expected `a,b` rows", path.display());
        }
        out.push((row[0].to_string(), row[1].to_string()));
    }
    Ok(out)
}

pub fn infer(a: &InferArgs, exec: Exec) -> anyhow::Result<()> {
    let cfg = load_config(&a.common)?;
    cfg.validate()?;
    let ck_path = a.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let (model, _) = read_checkpoint(&ck_path)?.into_model()?;
    if model.config().input_size != cfg.preprocess.target_size {
        return Err(Error::Config(format!(
            "checkpoint expects {} px inputs but preprocess.target_size is {}",
            model.config().input_size,
            cfg.preprocess.target_size
        ))
        .into());
    }
    let records = split_records(&cfg)?;
    let by_id: HashMap<&str, &LesionRecord> = records.iter().map(|r| (r.lesion_id.as_str(), r)).collect();

    // (output stem, lesion id) for both members of every pair.
    let explicit = a.pairs.is_some();
    let pairs: Vec<(String, String)> = match &a.pairs {
        Some(p) => read_pair_list(p)?,
        None => covering_pairs(&records, a.split).into_iter().map(|p| (p.a, p.b)).collect(),
    };
    if pairs.is_empty() {
        bail!("no pairs to run for split {}", a.split);
    }
    for (x, y) in &pairs {
        for id in [x, y] {
            if !by_id.contains_key(id.as_str()) {
                bail!("lesion {id} is not in {}", cfg.paths.dataset.display());
            }
        }
    }
    let needed: BTreeSet<&str> = pairs.iter().flat_map(|(x, y)| [x.as_str(), y.as_str()]).collect();
    let needed: Vec<&str> = needed.into_iter().collect();
    let images = exec
        .map(&needed, |id| normalized_image(&cfg, by_id[id]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let images: HashMap<&str, Array2<f64>> = needed.iter().copied().zip(images).collect();

    let probs = exec
        .map(&pairs, |(x, y)| model.predict_pair(&images[x.as_str()], &images[y.as_str()]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    // Lesions seen in several pairs get the mean of their predictions.
    let mut outputs: BTreeMap<String, (String, Array2<f64>, usize)> = BTreeMap::new();
    for (k, ((x, y), (px, py))) in pairs.iter().zip(probs).enumerate() {
        for (id, p) in [(x, px), (y, py)] {
            let stem = if explicit { format!("p{k:04}_{id}") } else { id.clone() };
            outputs
                .entry(stem)
                .and_modify(|e| {
                    e.1 += &p;
                    e.2 += 1;
                })
                .or_insert((id.clone(), p, 1));
        }
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.work_dir.join("predictions"));
    let (mask_dir, prob_dir) = (out.join("masks"), out.join("probs"));
    create_dir(&mask_dir)?;
    create_dir(&prob_dir)?;
    let outputs: Vec<(String, String, Array2<f64>)> =
        outputs.into_iter().map(|(stem, (id, sum, n))| (stem, id, sum / n as f64)).collect();
    exec.map(&outputs, |(stem, id, prob)| -> Result<()> {
        let prob = if a.crf { refine_with(prob, &images[id.as_str()], &cfg.crf, Exec::Sequential)? } else { prob.clone() };
        save_raw(&prob_dir.join(format!("{stem}.lseg")), &prob)?;
        save_mask(&mask_dir.join(format!("{stem}.png")), &prob.mapv(|v| v >= 0.5))
    })
    .into_iter()
    .collect::<Result<()>>()?;
    info!("{} masks from {} pairs written to {}", outputs.len(), pairs.len(), mask_dir.display());
    Ok(())
}

pub fn refine(a: &RefineArgs, exec: Exec) -> anyhow::Result<()> {
    let cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.crf.validate()?;
    let prob = load_raw(&a.prob)?;
    let (h, w) = prob.dim();
    if h != w {
        bail!("{}: probability map must be square, got {h}x{w}", a.prob.display());
    }
    let pre = PreprocessConfig { target_size: h, ..cfg.preprocess.clone() };
    let image = preprocess(&load_image(&a.image)?, &pre)?.image;
    let refined = refine_with(&prob, &image, &cfg.crf, exec)?;
    save_mask(&a.out, &refined.mapv(|v| v >= 0.5))?;
    if let Some(p) = &a.prob_out {
        save_raw(p, &refined)?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = p.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), p);
            }
        }
    }
    Ok(out)
}

pub fn evaluate(a: &EvaluateArgs, exec: Exec) -> anyhow::Result<()> {
    let pred = png_stems(&a.pred)?;
    let gt = png_stems(&a.gt)?;
    if pred.is_empty() {
        bail!("no masks found in {}", a.pred.display());
    }
    let unmatched: Vec<&str> = pred.keys().filter(|k| !gt.contains_key(*k)).map(|s| s.as_str()).collect();
    let ignored = gt.keys().filter(|k| !pred.contains_key(*k)).count();
    if ignored > 0 {
        info!("{ignored} ground-truth masks have no prediction and are not scored");
    }
    let matched: Vec<(&String, &PathBuf, &PathBuf)> =
        pred.iter().filter_map(|(id, p)| gt.get(id).map(|g| (id, p, g))).collect();
    let cases = exec
        .map(&matched, |(id, p, g)| -> Result<(String, Array2<bool>, Array2<bool>)> {
            Ok(((*id).clone(), load_mask(p)?, load_mask(g)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if !cases.is_empty() {
        let report = evaluate_set(&cases, exec)?;
        create_dir(&a.out)?;
        report.write_csv(&a.out.join("report.csv"))?;
        report.write_summary_json(&a.out.join("summary.json"))?;
        let table = report.table();
        let path = a.out.join("table.txt");
        std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
        println!("{table}");
    }
    if !unmatched.is_empty() {
        return Err(PartialFailure(format!(
            "{} predictions have no ground truth: {}",
            unmatched.len(),
            unmatched.join(", ")
        ))
        .into());
    }
    Ok(())
}

pub fn overlay(a: &OverlayArgs) -> anyhow::Result<()> {
    let window = (a.window[0], a.window[1]);
    if !(window.0 < window.1) {
        return Err(Error::Config(format!("window low {} must be below high {}", window.0, window.1)).into());
    }
    let image = load_image(&a.image)?;
    let pred = a.pred.as_deref().map(load_mask).transpose()?;
    let gt = a.gt.as_deref().map(load_mask).transpose()?;
    let rgb = super::render_overlay(&image, window, pred.as_ref(), gt.as_ref())?;
    rgb.save(&a.out).map_err(|e| Error::Image { path: a.out.clone(), source: e })?;
    Ok(())
}
