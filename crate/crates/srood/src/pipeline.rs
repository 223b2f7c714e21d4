//! Pipeline stages behind the CLI. Each stage reads its prerequisites from
//! the run directory and writes its artifacts back into it.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use srood_core::baseline::{baseline_scores, fit_linear_head};
use srood_core::checkpoint::parse_kv;
use srood_core::erosion::{apply_erosion, build_erosion_set, default_mask_sides, ErosionOp, Variant};
use srood_core::evaluation::{
    auroc, evaluate_pair, lipschitz_diagnostics, loss_ablation, offset_ablation, AblationTable, EvalReport, EvalRow,
    LipschitzDiagnostics,
};
use srood_core::metrics::{fit_phi, PerceptualExtractor};
use srood_core::repairer::RepairerModel;
use srood_core::rng::{stream, Stream};
use srood_core::scoring::{
    calibrate_threshold, score_images, score_records, select_erosion, select_erosion_label_free, ScoreFn, Selection,
};
use srood_core::training::{TrainState, Trainer};
use srood_core::Image;

use crate::config::ExperimentConfig;
use crate::datasets::{load_manifest, load_split, DatasetManifest, Split};
use crate::error::{io_err, AppError, AppResult};
use crate::io::{curve_csv, parse_scores_csv, read_checkpoint, read_text, scores_csv, write_file, ScoreRow};
use crate::report::{ablation_csv, ablation_text, emit_report, metadata_text, GridRows, HistogramInput};

pub const PHI_FILE: &str = "phi.ckpt";
pub const REPAIRER_FILE: &str = "repairer.ckpt";
pub const STATE_FILE: &str = "train_state.ckpt";
pub const EROSION_FILE: &str = "erosion.txt";
pub const THRESHOLD_FILE: &str = "threshold.txt";
pub const SCORES_FILE: &str = "scores.csv";
pub const CONFIG_FILE: &str = "config.resolved";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Loss,
    Offset,
    Variant,
}

impl std::str::FromStr for AblationKind {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        match s {
            "loss" => Ok(AblationKind::Loss),
            "offset" => Ok(AblationKind::Offset),
            "variant" => Ok(AblationKind::Variant),
            other => Err(AppError::Config(format!("unknown ablation kind {other:?}"))),
        }
    }
}

impl AblationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::Loss => "loss",
            AblationKind::Offset => "offset",
            AblationKind::Variant => "variant",
        }
    }
}

/// One experiment's configuration and output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Run {
    /// Creates the output directory and writes the resolved config into it.
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> AppResult<Self> {
        let out = out.into();
        cfg.validate()?;
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        write_file(&out.join(CONFIG_FILE), cfg.snapshot())?;
        Ok(Self { cfg, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn manifest(&self) -> AppResult<DatasetManifest> {
        let path = self
            .cfg
            .manifest
            .as_ref()
            .ok_or_else(|| AppError::MissingPrerequisite("manifest (set `manifest` in the config)".to_string()))?;
        load_manifest(path)
    }

    pub fn load(&self, manifest: &DatasetManifest, split: Split) -> AppResult<Vec<Image>> {
        let (h, w, c) = self.cfg.dims();
        let images = load_split(manifest, split, h, w, c)?;
        if images.is_empty() {
            return Err(AppError::EmptySplit(split.as_str()));
        }
        Ok(images)
    }

    fn write_meta(&self, command: &str, started: (u64, Instant), extra: &[(&str, String)]) -> AppResult<()> {
        let mut e: Vec<(String, String)> = vec![
            ("command".into(), command.into()),
            ("config_hash".into(), self.cfg.hash()),
            ("seed".into(), self.cfg.seed.to_string()),
            ("started_unix".into(), started.0.to_string()),
            ("finished_unix".into(), unix_now().to_string()),
            ("wall_seconds".into(), format!("{:.3}", started.1.elapsed().as_secs_f64())),
        ];
        e.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        write_file(&self.path(&format!("{command}.meta")), metadata_text(&e))
    }

    pub fn load_phi(&self) -> AppResult<PerceptualExtractor> {
        Ok(PerceptualExtractor::from_bytes(&read_checkpoint(&self.path(PHI_FILE))?)?)
    }

    pub fn load_model(&self) -> AppResult<RepairerModel> {
        Ok(RepairerModel::from_bytes(&read_checkpoint(&self.path(REPAIRER_FILE))?)?)
    }

    /// Index into the variant's erosion set and the chosen op.
    pub fn load_selection(&self) -> AppResult<(usize, ErosionOp)> {
        let text = read_text(&self.path(EROSION_FILE), "erosion selection (run select-erosion)")?;
        let kv = parse_kv(&text)?;
        Ok((kv.parse("index")?, kv.parse("op")?))
    }

    pub fn load_threshold(&self) -> AppResult<Option<f64>> {
        let p = self.path(THRESHOLD_FILE);
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(parse_kv(&read_text(&p, "threshold")?)?.parse("epsilon")?))
    }
}

fn started() -> (u64, Instant) {
    (unix_now(), Instant::now())
}

pub fn fit_phi_stage(run: &Run) -> AppResult<PerceptualExtractor> {
    let t = started();
    let m = run.manifest()?;
    let train = run.load(&m, Split::Train)?;
    let (phi, curve) = fit_phi(&train, run.cfg.phi.clone(), &run.cfg.phi_fit, &mut stream(run.cfg.seed, Stream::PhiFit))?;
    write_file(&run.path(PHI_FILE), phi.to_bytes())?;
    write_file(&run.path("phi_curve.csv"), curve_csv("loss", &curve))?;
    run.write_meta("fit-phi", t, &[("n_train", train.len().to_string())])?;
    Ok(phi)
}

/// Trains the repairer, resuming from a saved state when one exists.
pub fn train_stage(run: &Run) -> AppResult<RepairerModel> {
    let t = started();
    let phi = run.load_phi()?;
    let m = run.manifest()?;
    let train = run.load(&m, Split::Train)?;
    let (h, w, _) = run.cfg.dims();
    let set = build_erosion_set(run.cfg.variant, h, w)?;
    let mut cfg = run.cfg.train.clone();
    cfg.seed = run.cfg.seed;
    let state_path = run.path(STATE_FILE);
    let trainer = if state_path.is_file() {
        let state = TrainState::from_bytes(&read_checkpoint(&state_path)?)?;
        Trainer::resume(state, &train, &set, &phi, run.cfg.loss, cfg)?
    } else {
        let model = RepairerModel::init(run.cfg.repairer.clone(), &mut stream(run.cfg.seed, Stream::WeightInit))?;
        Trainer::new(model, &train, &set, &phi, run.cfg.loss, cfg)?
    };
    let (model, trace) = trainer.run(|state| write_file(&state_path, state.to_bytes()))?;
    write_file(&run.path(REPAIRER_FILE), model.to_bytes())?;
    write_file(&run.path("train_trace.csv"), curve_csv("loss", &trace.losses))?;
    if state_path.is_file() {
        std::fs::remove_file(&state_path).map_err(io_err(&state_path))?;
    }
    run.write_meta("train", t, &[("n_train", train.len().to_string()), ("iterations", trace.iterations.to_string())])?;
    Ok(model)
}

pub fn select_stage(run: &Run) -> AppResult<Selection> {
    let t = started();
    let phi = run.load_phi()?;
    let model = run.load_model()?;
    let m = run.manifest()?;
    let (h, w, _) = run.cfg.dims();
    let set = build_erosion_set(run.cfg.variant, h, w)?;
    let val_id = run.load(&m, Split::ValId)?;
    let (sel, n_ood) = if run.cfg.label_free_selection {
        (select_erosion_label_free(&model, &phi, &set, &val_id)?, 0)
    } else {
        let val_ood = run.load(&m, Split::ValOod)?;
        (select_erosion(&model, &phi, &set, &val_id, &val_ood)?, val_ood.len())
    };
    let mut text = format!("index = {}\nop = {}\n", sel.index, sel.op);
    for (i, (op, v)) in set.ops().iter().zip(sel.values.iter().map(Some).chain(std::iter::repeat(None))).enumerate() {
        let v = match v {
            Some(Some(x)) => format!("{x:?}"),
            Some(None) => "undefined".to_string(),
            None => "not evaluated".to_string(),
        };
        let _ = writeln!(text, "# {i} {op} {v}");
    }
    write_file(&run.path(EROSION_FILE), text)?;
    run.write_meta(
        "select-erosion",
        t,
        &[("n_val_id", val_id.len().to_string()), ("n_val_ood", n_ood.to_string())],
    )?;
    Ok(sel)
}

pub fn calibrate_stage(run: &Run) -> AppResult<f64> {
    let t = started();
    let phi = run.load_phi()?;
    let model = run.load_model()?;
    let (_, op) = run.load_selection()?;
    let m = run.manifest()?;
    let val_id = run.load(&m, Split::ValId)?;
    let scores = score_images(&model, &phi, &op, &val_id, ScoreFn::Lpips)?;
    let eps = calibrate_threshold(&scores, run.cfg.threshold)?;
    write_file(&run.path(THRESHOLD_FILE), format!("method = {}\nepsilon = {eps:?}\n", run.cfg.threshold))?;
    run.write_meta("calibrate", t, &[("n_val_id", val_id.len().to_string())])?;
    Ok(eps)
}

/// Scores of the test splits, in manifest order.
struct TestScores {
    rows: Vec<ScoreRow>,
    id: Vec<f64>,
    ood: Vec<f64>,
}

fn score_tests(run: &Run, model: &RepairerModel, phi: &PerceptualExtractor, index: usize, op: &ErosionOp) -> AppResult<TestScores> {
    let m = run.manifest()?;
    let eps = run.load_threshold()?;
    let id_imgs = run.load(&m, Split::TestId)?;
    let ood_imgs = run.load(&m, Split::TestOod)?;
    let pair = evaluate_pair(model, phi, op, &id_imgs, &ood_imgs, ScoreFn::Lpips)?;
    let id_rec = score_records(&pair.id, &m.indices(Split::TestId), index, eps)?;
    let ood_rec = score_records(&pair.ood, &m.indices(Split::TestOod), index, eps)?;
    let mut rows: Vec<ScoreRow> = id_rec
        .into_iter()
        .map(|record| ScoreRow { split: Split::TestId, record })
        .chain(ood_rec.into_iter().map(|record| ScoreRow { split: Split::TestOod, record }))
        .collect();
    rows.sort_by_key(|r| r.record.sample_id);
    Ok(TestScores { rows, id: pair.id, ood: pair.ood })
}

pub fn score_stage(run: &Run) -> AppResult<Vec<ScoreRow>> {
    let t = started();
    let phi = run.load_phi()?;
    let model = run.load_model()?;
    let (index, op) = run.load_selection()?;
    let s = score_tests(run, &model, &phi, index, &op)?;
    write_file(&run.path(SCORES_FILE), scores_csv(&s.rows))?;
    run.write_meta("score", t, &[("n_test_id", s.id.len().to_string()), ("n_test_ood", s.ood.len().to_string())])?;
    Ok(s.rows)
}

fn baseline_csv(run: &Run, phi: &PerceptualExtractor) -> AppResult<String> {
    let m = run.manifest()?;
    let train = run.load(&m, Split::Train)?;
    let feats = train.iter().map(|x| phi.pooled_features(x)).collect::<Result<Vec<_>, _>>()?;
    let head = fit_linear_head(&feats, &m.labels(Split::Train), &run.cfg.head)?;
    write_file(&run.path("linear_head.ckpt"), head.to_bytes())?;
    let mut msp = (Vec::new(), Vec::new());
    let mut maxlogit = (Vec::new(), Vec::new());
    for (split, which) in [(Split::TestId, false), (Split::TestOod, true)] {
        for x in run.load(&m, split)? {
            let (a, b) = baseline_scores(&head, phi, &x)?;
            if which {
                msp.1.push(a);
                maxlogit.1.push(b);
            } else {
                msp.0.push(a);
                maxlogit.0.push(b);
            }
        }
    }
    Ok(format!(
        "method,auroc\nmsp,{:.6}\nmaxlogit,{:.6}\n",
        auroc(&msp.0, &msp.1)?,
        auroc(&maxlogit.0, &maxlogit.1)?
    ))
}

/// Scores both test splits and writes the report. With `baselines`, also
/// fits the labelled classifier head and tabulates its scores.
pub fn evaluate_stage(run: &Run, baselines: bool) -> AppResult<EvalReport> {
    let t = started();
    let phi = run.load_phi()?;
    let model = run.load_model()?;
    let (index, op) = run.load_selection()?;
    let s = score_tests(run, &model, &phi, index, &op)?;
    let report = EvalReport {
        rows: vec![EvalRow {
            id_dataset: run.cfg.id_name.clone(),
            ood_dataset: run.cfg.ood_name.clone(),
            variant: run.cfg.variant,
            erosion: op,
            auroc: auroc(&s.id, &s.ood)?,
            n_id: s.id.len(),
            n_ood: s.ood.len(),
            seed: run.cfg.seed,
        }],
        metadata: vec![("config_hash".into(), run.cfg.hash())],
    };
    write_file(&run.path(SCORES_FILE), scores_csv(&s.rows))?;
    let hist = HistogramInput { id_name: &run.cfg.id_name, ood_name: &run.cfg.ood_name, id: &s.id, ood: &s.ood };
    emit_report(&report, &[hist], &[], &run.out)?;
    if baselines {
        write_file(&run.path("baselines.csv"), baseline_csv(run, &phi)?)?;
    }
    run.write_meta("evaluate", t, &[("n_test_id", s.id.len().to_string()), ("n_test_ood", s.ood.len().to_string())])?;
    Ok(report)
}

/// Runs train, selection and evaluation for one variant in a subdirectory,
/// reusing the parent's perceptual network.
fn variant_run(parent: &Run, variant: Variant) -> AppResult<f64> {
    let mut cfg = parent.cfg.clone();
    cfg.variant = variant;
    let sub = Run::new(cfg, parent.out.join("variants").join(variant.as_str()))?;
    write_file(&sub.path(PHI_FILE), read_checkpoint(&parent.path(PHI_FILE))?)?;
    train_stage(&sub)?;
    select_stage(&sub)?;
    Ok(evaluate_stage(&sub, false)?.rows[0].auroc)
}

pub fn ablate_stage(run: &Run, kind: AblationKind) -> AppResult<AblationTable> {
    let t = started();
    let table = match kind {
        AblationKind::Variant => {
            let mut table = AblationTable::new(Variant::ALL.iter().map(|v| v.to_string()).collect());
            let values = Variant::ALL.iter().map(|&v| variant_run(run, v)).collect::<AppResult<Vec<_>>>()?;
            table.push_row(&run.cfg.ood_name, values)?;
            table
        }
        AblationKind::Loss | AblationKind::Offset => {
            let phi = run.load_phi()?;
            let model = run.load_model()?;
            let m = run.manifest()?;
            let id = run.load(&m, Split::TestId)?;
            let ood = run.load(&m, Split::TestOod)?;
            let oods: [(&str, &[Image]); 1] = [(&run.cfg.ood_name, &ood)];
            if kind == AblationKind::Loss {
                let (_, op) = run.load_selection()?;
                loss_ablation(&model, &phi, &op, run.cfg.loss, &id, &oods)?
            } else {
                if run.cfg.variant != Variant::Inpaint {
                    return Err(AppError::MissingPrerequisite("offset ablation needs an inpaint model".to_string()));
                }
                let side = match run.load_selection() {
                    Ok((_, ErosionOp::Blackout(r))) => r.height,
                    _ => *default_mask_sides(run.cfg.repairer.height).last().expect("nonempty"),
                };
                offset_ablation(&model, &phi, side, &id, &oods)?
            }
        }
    };
    let name = format!("ablation_{}", kind.as_str());
    write_file(&run.path(&format!("{name}.csv")), ablation_csv(&table))?;
    write_file(&run.path(&format!("{name}.txt")), ablation_text(&table))?;
    run.write_meta(&format!("ablate-{}", kind.as_str()), t, &[])?;
    Ok(table)
}

/// Smoothness diagnostics for ID and OOD test samples.
pub fn diagnose_stage(run: &Run) -> AppResult<(LipschitzDiagnostics, LipschitzDiagnostics)> {
    let t = started();
    let model = run.load_model()?;
    let (_, op) = run.load_selection()?;
    let m = run.manifest()?;
    let n = run.cfg.diagnose_samples.max(1);
    let mut id = run.load(&m, Split::TestId)?;
    let mut ood = run.load(&m, Split::TestOod)?;
    id.truncate(n);
    ood.truncate(n);
    let mut rng = stream(run.cfg.seed, Stream::Probe);
    let d_id = lipschitz_diagnostics(&model, &op, &id, run.cfg.diagnose_probes, &mut rng)?;
    let d_ood = lipschitz_diagnostics(&model, &op, &ood, run.cfg.diagnose_probes, &mut rng)?;
    let mut s = String::new();
    for (name, d) in [("id", &d_id), ("ood", &d_ood)] {
        let _ = writeln!(s, "{name}.lip_g_estimate = {:?}", d.lip_g_estimate);
        let _ = writeln!(s, "{name}.delta_z_mean = {:?}", d.delta_z.mean);
        let _ = writeln!(s, "{name}.delta_z_max = {:?}", d.delta_z.max);
        let _ = writeln!(s, "{name}.delta_x_mean = {:?}", d.delta_x.mean);
        let _ = writeln!(s, "{name}.delta_x_max = {:?}", d.delta_x.max);
    }
    let ratio = if d_id.delta_z.mean > 0.0 { d_ood.delta_z.mean / d_id.delta_z.mean } else { f64::NAN };
    let _ = writeln!(s, "delta_z_mean_ratio_ood_over_id = {ratio:?}");
    write_file(&run.path("diagnostics.txt"), s)?;
    run.write_meta("diagnose", t, &[])?;
    Ok((d_id, d_ood))
}

fn grid_rows(name: &str, images: &[Image], model: &RepairerModel, op: &ErosionOp) -> AppResult<GridRows> {
    let eroded = images.iter().map(|x| apply_erosion(op, x)).collect::<Result<Vec<_>, _>>()?;
    let repaired = eroded.iter().map(|x| model.repair(x)).collect::<Result<Vec<_>, _>>()?;
    Ok(GridRows { name: name.to_string(), original: images.to_vec(), eroded, repaired })
}

/// Re-emits the evaluation report from saved scores and adds image grids.
pub fn report_stage(run: &Run) -> AppResult<Vec<PathBuf>> {
    let t = started();
    let model = run.load_model()?;
    let (_, op) = run.load_selection()?;
    let rows = parse_scores_csv(&read_text(&run.path(SCORES_FILE), "scores (run evaluate)")?)?;
    let pick = |s: Split| rows.iter().filter(|r| r.split == s).map(|r| r.record.score).collect::<Vec<_>>();
    let (id, ood) = (pick(Split::TestId), pick(Split::TestOod));
    let report = EvalReport {
        rows: vec![EvalRow {
            id_dataset: run.cfg.id_name.clone(),
            ood_dataset: run.cfg.ood_name.clone(),
            variant: run.cfg.variant,
            erosion: op,
            auroc: auroc(&id, &ood)?,
            n_id: id.len(),
            n_ood: ood.len(),
            seed: run.cfg.seed,
        }],
        metadata: vec![],
    };
    let m = run.manifest()?;
    let k = run.cfg.grid_columns;
    let mut grids = Vec::new();
    if k > 0 {
        for (split, name) in [(Split::TestId, &run.cfg.id_name), (Split::TestOod, &run.cfg.ood_name)] {
            let mut imgs = run.load(&m, split)?;
            imgs.truncate(k);
            grids.push(grid_rows(name, &imgs, &model, &op)?);
        }
    }
    let hist = HistogramInput { id_name: &run.cfg.id_name, ood_name: &run.cfg.ood_name, id: &id, ood: &ood };
    let files = emit_report(&report, &[hist], &grids, &run.out)?;
    run.write_meta("report", t, &[])?;
    Ok(files)
}
