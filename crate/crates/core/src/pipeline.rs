//! End-to-end orchestration: preprocess both domains, translate the labelled
//! source into the target modality, train every ensemble member on the
//! translated images, segment the target images, fuse, post-process and
//! score.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::augment::Probabilities;
use crate::config::{ModelSpec, PipelineConfig};
use crate::ensemble::{fuse_union, largest_component};
use crate::metrics::{evaluate_cohort, CohortReport};
use crate::phantom::{generate_cohort, Manifest, MANIFEST_FILE};
use crate::preprocess::{align_to_template, compute_roi_box, crop_and_normalize, restore_to_native, Preprocessed, ProvenanceRecord};
use crate::segnets::SegNet;
use crate::synthesis::{collect_slices, slice_mean_postfilter, train_translator, translate_volume, TranslatorRun};
use crate::trainer::{train_segmentation_model, SegTrainRun};
use crate::volume::{load_labels, load_volume, save_labels, save_volume, LabelMap, Volume, VoxelBox, VS};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub image: Volume,
    pub labels: Option<LabelMap>,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub template: Volume,
    /// Labelled source-modality subjects.
    pub source: Vec<Subject>,
    /// Target-modality subjects; labels, if any, are only used for scoring.
    pub target: Vec<Subject>,
    /// Held-out target-modality subjects to segment instead of `target`.
    pub test: Vec<Subject>,
}

impl Cohort {
    /// Subjects that get segmented and scored.
    pub fn evaluation_set(&self) -> &[Subject] {
        if self.test.is_empty() {
            &self.target
        } else {
            &self.test
        }
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::load(&dir.join(MANIFEST_FILE))
}

/// Domain A with labels as source, domain B (labels kept for scoring) as
/// target.
fn manifest_subjects(dir: &Path, m: &Manifest) -> Result<(Vec<Subject>, Vec<Subject>)> {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for e in &m.subjects {
        let labels = load_labels(dir.join(&e.labels))?;
        src.push(Subject {
            id: e.id.clone(),
            image: load_volume(dir.join(&e.a))?,
            labels: Some(labels.clone()),
        });
        tgt.push(Subject {
            id: e.id.clone(),
            image: load_volume(dir.join(&e.b))?,
            labels: Some(labels),
        });
    }
    Ok((src, tgt))
}

fn file_id(p: &Path) -> String {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("subject");
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

/// Reads everything `cfg.data` points at.
pub fn load_cohort(cfg: &PipelineConfig) -> Result<Cohort> {
    let d = &cfg.data;
    let (template, source, target) = if let Some(dir) = &d.cohort {
        let m = read_manifest(dir)?;
        let template = load_volume(d.template.clone().unwrap_or_else(|| dir.join(&m.template)))?;
        let (s, t) = manifest_subjects(dir, &m)?;
        (template, s, t)
    } else {
        let template = load_volume(d.template.as_ref().expect("validated"))?;
        let source = d
            .source_images
            .iter()
            .zip(&d.source_labels)
            .map(|(i, l)| {
                Ok(Subject {
                    id: file_id(i),
                    image: load_volume(i)?,
                    labels: Some(load_labels(l)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let target = d
            .target_images
            .iter()
            .enumerate()
            .map(|(k, i)| {
                Ok(Subject {
                    id: file_id(i),
                    image: load_volume(i)?,
                    labels: d.target_labels.get(k).map(load_labels).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        (template, source, target)
    };
    let test = match &d.test_cohort {
        Some(dir) => manifest_subjects(dir, &read_manifest(dir)?)?.1,
        None => Vec::new(),
    };
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("the cohort needs at least one source and one target subject".into()));
    }
    Ok(Cohort {
        template,
        source,
        target,
        test,
    })
}

/// Generates the phantom cohorts named in the config if they do not exist.
pub fn ensure_phantom(cfg: &PipelineConfig) -> Result<()> {
    let Some(p) = &cfg.phantom else { return Ok(()) };
    if let Some(dir) = &cfg.data.cohort {
        if !dir.join(MANIFEST_FILE).exists() {
            log::info!("generating {} phantom subjects in {}", p.subjects, dir.display());
            generate_cohort(&p.config, p.subjects, dir)?;
        }
    }
    if let Some(dir) = &cfg.data.test_cohort {
        if !dir.join(MANIFEST_FILE).exists() {
            let tc = p.test_config.clone().unwrap_or_else(|| p.config.clone());
            let n = if p.test_subjects > 0 { p.test_subjects } else { p.subjects };
            log::info!("generating {n} held-out phantom subjects in {}", dir.display());
            generate_cohort(&tc, n, dir)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PrepSubject {
    pub id: String,
    pub pre: Preprocessed,
    /// Ground truth on the native grid, when known.
    pub truth: Option<LabelMap>,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub roi: VoxelBox,
    pub source: Vec<PrepSubject>,
    pub target: Vec<PrepSubject>,
    /// Subjects to segment; a copy of `target` when there is no test cohort.
    pub evaluation: Vec<PrepSubject>,
}

/// Aligns every subject to the template, derives the shared ROI from the
/// source labels and crops and normalizes all domains with it.
pub fn prepare(cohort: &Cohort, cfg: &PipelineConfig) -> Result<Prepared> {
    let mut pc = cfg.preprocess.clone();
    if !cfg.stages.crop {
        pc.roi_size = cohort.template.shape();
    }
    let align = |s: &Subject, with_labels: bool| {
        log::info!("preprocessing {}", s.id);
        align_to_template(&s.image, if with_labels { s.labels.as_ref() } else { None }, &cohort.template, &pc)
    };
    let src_aligned = cohort.source.iter().map(|s| align(s, true)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<LabelMap> = src_aligned.iter().filter_map(|a| a.labels.clone()).collect();
    let roi = compute_roi_box(&labels, pc.roi_size)?;
    log::info!("ROI {:?} + {:?}", roi.min, roi.size);
    let finish = |subjects: &[Subject], with_labels: bool| -> Result<Vec<PrepSubject>> {
        subjects
            .iter()
            .map(|s| {
                Ok(PrepSubject {
                    id: s.id.clone(),
                    pre: crop_and_normalize(&align(s, with_labels)?, &roi)?,
                    truth: s.labels.clone(),
                })
            })
            .collect()
    };
    let source = src_aligned
        .iter()
        .zip(&cohort.source)
        .map(|(a, s)| {
            Ok(PrepSubject {
                id: s.id.clone(),
                pre: crop_and_normalize(a, &roi)?,
                truth: s.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let target = finish(&cohort.target, false)?;
    let evaluation = if cohort.test.is_empty() {
        target.clone()
    } else {
        finish(&cohort.test, false)?
    };
    Ok(Prepared {
        roi,
        source,
        target,
        evaluation,
    })
}

/// Trains the translator on source and target ROIs and returns the
/// source images translated to the target modality, with their labels.
/// With synthesis disabled the source images are passed through.
pub fn synthesize(prep: &Prepared, cfg: &PipelineConfig, out: Option<&Path>) -> Result<(Option<TranslatorRun>, Vec<(Volume, LabelMap)>)> {
    let labelled = |s: &PrepSubject| -> Result<LabelMap> {
        s.pre
            .labels
            .clone()
            .ok_or_else(|| Error::Empty(format!("source subject {} has no labels", s.id)))
    };
    if !cfg.stages.synthesis {
        let pairs = prep
            .source
            .iter()
            .map(|s| Ok((s.pre.volume.clone(), labelled(s)?)))
            .collect::<Result<Vec<_>>>()?;
        return Ok((None, pairs));
    }
    let syn = &cfg.synthesis;
    let a: Vec<Volume> = prep.source.iter().map(|s| s.pre.volume.clone()).collect();
    let b: Vec<Volume> = prep.target.iter().map(|s| s.pre.volume.clone()).collect();
    let run = train_translator(&collect_slices(&a, syn.axis)?, &collect_slices(&b, syn.axis)?, syn, &cfg.train, out)?;
    log::info!("translator epoch {} selected", run.selected_epoch);
    let mut pairs = Vec::with_capacity(a.len());
    for (s, v) in prep.source.iter().zip(&a) {
        let mut t = translate_volume(v, &run.g_ab, syn.axis)?;
        if syn.slice_mean_postfilter {
            t = slice_mean_postfilter(&t, syn.axis, 2)?;
        }
        if let Some(dir) = out {
            save_volume(&t, dir.join(format!("{}_image.nii.gz", s.id)))?;
        }
        pairs.push((t, labelled(s)?));
    }
    Ok((Some(run), pairs))
}

/// SplitMix64 of `seed` and `stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    crate::phantom::subject_seed(seed, stream as usize)
}

pub struct TrainedModel {
    pub spec: ModelSpec,
    pub net: SegNet,
    pub run: SegTrainRun,
}

/// Trains one ensemble member. Initialization and augmentation seeds are
/// derived from the run seed and the member's position.
pub fn train_model(index: usize, spec: &ModelSpec, pairs: &[(Volume, LabelMap)], cfg: &PipelineConfig, out: Option<&Path>) -> Result<TrainedModel> {
    let seed = cfg.train.seed;
    let mut net = SegNet::new(&spec.network, derive_seed(seed, 2 * index as u64))?;
    let mut aug = spec.augmentation.clone();
    aug.seed = derive_seed(aug.seed ^ seed, 2 * index as u64 + 1);
    if !cfg.stages.augmentation {
        aug.probabilities = Probabilities::none();
    }
    log::info!("training {} ({} parameters)", spec.name, net.num_parameters());
    let run = train_segmentation_model(&mut net, pairs, &aug, &cfg.loss, &cfg.train, out)?;
    log::info!("{}: best epoch {}", spec.name, run.best_epoch);
    let net = SegNet::from_checkpoint(&run.best)?;
    Ok(TrainedModel {
        spec: spec.clone(),
        net,
        run,
    })
}

/// Native-grid segmentation from an ROI-space one.
pub fn finish_segmentation(seg: &LabelMap, p: &ProvenanceRecord, postprocess: bool) -> Result<LabelMap> {
    let seg = if postprocess {
        largest_component(seg, VS)?
    } else {
        seg.clone()
    };
    restore_to_native(&seg, p)
}

pub struct Segmentations {
    pub ids: Vec<String>,
    /// `[model][subject]`, native grid.
    pub per_model: Vec<Vec<LabelMap>>,
    pub ensemble: Vec<LabelMap>,
}

/// Runs every model on every subject, fuses by union and maps back to the
/// native grids. Single-model outputs get the same post-processing.
pub fn segment(models: &[&SegNet], subjects: &[PrepSubject], postprocess: bool) -> Result<Segmentations> {
    let mut per_model = vec![Vec::with_capacity(subjects.len()); models.len()];
    let mut ensemble = Vec::with_capacity(subjects.len());
    for s in subjects {
        let mut roi_segs = Vec::with_capacity(models.len());
        for (k, m) in models.iter().enumerate() {
            let seg = m.predict_labels(&s.pre.volume)?;
            per_model[k].push(finish_segmentation(&seg, &s.pre.provenance, postprocess)?);
            roi_segs.push(seg);
        }
        ensemble.push(finish_segmentation(&fuse_union(&roi_segs)?, &s.pre.provenance, postprocess)?);
    }
    Ok(Segmentations {
        ids: subjects.iter().map(|s| s.id.clone()).collect(),
        per_model,
        ensemble,
    })
}

/// Scores segmentations against the subjects' native ground truth; `None`
/// if any subject lacks it.
pub fn score(subjects: &[PrepSubject], segs: &[LabelMap]) -> Result<Option<CohortReport>> {
    let mut rows = Vec::with_capacity(subjects.len());
    for (s, seg) in subjects.iter().zip(segs) {
        let Some(t) = &s.truth else { return Ok(None) };
        rows.push((s.id.clone(), seg.clone(), t.clone()));
    }
    evaluate_cohort(&rows).map(Some)
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassScores {
    pub vs_dice: f64,
    pub cochlea_dice: f64,
    pub mean_dice: f64,
}

impl ClassScores {
    pub fn from_report(r: &CohortReport) -> ClassScores {
        let d = |c: &str| r.summary_for(c).map_or(f64::NAN, |s| s.dice_mean);
        let (vs, co) = (d("VS"), d("cochlea"));
        ClassScores {
            vs_dice: vs,
            cochlea_dice: co,
            mean_dice: 0.5 * (vs + co),
        }
    }
}

pub struct PipelineResult {
    pub roi: VoxelBox,
    pub translator_epoch: Option<usize>,
    pub models: Vec<TrainedModel>,
    pub segmentations: Segmentations,
    pub ensemble_report: Option<CohortReport>,
    pub model_reports: Vec<Option<CohortReport>>,
}

impl PipelineResult {
    pub fn summary(&self) -> serde_json::Value {
        let scores = |r: &Option<CohortReport>| r.as_ref().map(ClassScores::from_report);
        json!({
            "roi": self.roi,
            "translator_selected_epoch": self.translator_epoch,
            "ensemble": scores(&self.ensemble_report),
            "models": self.models.iter().zip(&self.model_reports).map(|(m, r)| json!({
                "name": m.spec.name,
                "best_epoch": m.run.best_epoch,
                "scores": scores(r),
            })).collect::<Vec<_>>(),
        })
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

/// Everything from raw volumes to scored native-space segmentations.
///
/// Writes into `out`: `synthesis/` (translator state, metrics and the
/// translated source ROIs), `models/<name>/` (per-epoch checkpoints,
/// `metrics.csv`, `best.ckpt`, single-model `report.csv`),
/// `segmentations/<id>.nii.gz`, `provenance/<id>_provenance.json`, `report.csv` and
/// `summary.json`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineResult> {
    cfg.validate()?;
    ensure_phantom(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cohort = load_cohort(cfg)?;
    let prep = prepare(&cohort, cfg)?;
    write_json(&out.join("roi.json"), &prep.roi)?;

    let syn_dir = out.join("synthesis");
    let (run, pairs) = synthesize(&prep, cfg, Some(&syn_dir))?;

    let mut models = Vec::with_capacity(cfg.models.len());
    for (i, spec) in cfg.models.iter().enumerate() {
        models.push(train_model(i, spec, &pairs, cfg, Some(&out.join("models").join(&spec.name)))?);
    }

    let nets: Vec<&SegNet> = models.iter().map(|m| &m.net).collect();
    let segs = segment(&nets, &prep.evaluation, cfg.stages.postprocess)?;
    let seg_dir = out.join("segmentations");
    let prov_dir = out.join("provenance");
    for d in [&seg_dir, &prov_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (s, seg) in prep.evaluation.iter().zip(&segs.ensemble) {
        save_labels(seg, seg_dir.join(format!("{}.nii.gz", s.id)))?;
        s.pre.provenance.save(&provenance_path(&prov_dir, &s.id))?;
    }
    let ensemble_report = score(&prep.evaluation, &segs.ensemble)?;
    if let Some(r) = &ensemble_report {
        r.write_csv(&out.join("report.csv"))?;
    }
    let mut model_reports = Vec::with_capacity(models.len());
    for (m, segs_m) in models.iter().zip(&segs.per_model) {
        let r = score(&prep.evaluation, segs_m)?;
        if let Some(r) = &r {
            r.write_csv(&out.join("models").join(&m.spec.name).join("report.csv"))?;
        }
        model_reports.push(r);
    }
    let result = PipelineResult {
        roi: prep.roi,
        translator_epoch: run.map(|r| r.selected_epoch),
        models,
        segmentations: segs,
        ensemble_report,
        model_reports,
    };
    write_json(&out.join("summary.json"), &result.summary())?;
    Ok(result)
}

/// Subject ids of every `<id>_image.nii.gz` in `dir`, sorted.
pub fn list_ids(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(|n| n.strip_suffix(suffix)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_image.nii.gz"))
}

pub fn labels_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_labels.nii.gz"))
}

pub fn provenance_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_provenance.json"))
}

/// Writes preprocessed subjects as `<id>_image`, `<id>_labels` (when
/// present) and `<id>_provenance.json`; native ground truth, when known,
/// goes to `truth/<id>.nii.gz` under `dir`'s parent.
pub fn save_prepared(subjects: &[PrepSubject], dir: &Path, truth_dir: Option<&Path>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in subjects {
        save_volume(&s.pre.volume, image_path(dir, &s.id))?;
        if let Some(l) = &s.pre.labels {
            save_labels(l, labels_path(dir, &s.id))?;
        }
        s.pre.provenance.save(&provenance_path(dir, &s.id))?;
        if let (Some(t), Some(td)) = (&s.truth, truth_dir) {
            fs::create_dir_all(td).map_err(|e| Error::io(td, e))?;
            save_labels(t, td.join(format!("{}.nii.gz", s.id)))?;
        }
    }
    Ok(())
}

/// Reads a directory written by [`save_prepared`].
pub fn load_prepared(dir: &Path) -> Result<Vec<PrepSubject>> {
    let ids = list_ids(dir, "_image.nii.gz")?;
    if ids.is_empty() {
        return Err(Error::Empty(format!("no *_image.nii.gz files in {}", dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let lp = labels_path(dir, &id);
            let pp = provenance_path(dir, &id);
            let volume = load_volume(image_path(dir, &id))?;
            let provenance = if pp.exists() {
                ProvenanceRecord::load(&pp)?
            } else {
                // a bare ROI image: treat its own grid as template and native
                let g = volume.geometry().clone();
                ProvenanceRecord {
                    rigid: crate::preprocess::RigidTransform::identity(),
                    template_geometry: g.clone(),
                    roi_box: VoxelBox::full(g.shape),
                    intensity_min: 0.0,
                    intensity_max: 1.0,
                    native_geometry: g,
                }
            };
            Ok(PrepSubject {
                pre: Preprocessed {
                    volume,
                    labels: lp.exists().then(|| load_labels(&lp)).transpose()?,
                    provenance,
                },
                truth: None,
                id,
            })
        })
        .collect()
}
