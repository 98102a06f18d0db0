//! Per-episode drivers shared by the CLI and the benchmark harnesses.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::background::BackgroundModel;
use crate::baseline::{run_misvm_episode, MisvmConfig, ObjectnessScorer};
use crate::col::{run_col, score_query_with, ColConfig, ColResult};
use crate::dataio::{Dataset, ImageRecord, ProposalSet};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::eval::{
    binomial_ci95, class_agnostic_corloc, evaluate_detections, Detection, EpisodeMetrics,
    EvalOptions, MetricsReport, Selection,
};
use crate::wsod::{detections_from_scores, run_wsod, DetectConfig, TrainConfig};

/// Detector used for the query images of a WSOD episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vmf,
    Misvm,
    /// The vMF pipeline with EM disabled.
    ProtoInit,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vmf" => Ok(Self::Vmf),
            "misvm" => Ok(Self::Misvm),
            "proto-init" => Ok(Self::ProtoInit),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (vmf, misvm, proto-init)"
            ))),
        }
    }
}

/// Support-side summary of one class in one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSelection {
    pub class: String,
    pub image_ids: Vec<String>,
    pub top_index: Vec<usize>,
    /// EM iterations, or MI-SVM rounds.
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Class-agnostic CorLoc of the selected support boxes, in percent.
    pub corloc: f64,
}

impl SupportSelection {
    fn new(
        dataset: &Dataset,
        class: &str,
        image_ids: Vec<String>,
        top_index: Vec<usize>,
        iterations: usize,
        kappa: Option<f64>,
        iou_thresh: f64,
    ) -> Result<Self> {
        let selections = image_ids
            .iter()
            .zip(&top_index)
            .map(|(id, &j)| {
                Ok(Selection {
                    image_id: id.clone(),
                    bbox: dataset.proposals(id)?.boxes[j],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let records = image_ids
            .iter()
            .map(|id| dataset.index.get(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        let corloc = class_agnostic_corloc(&selections, &records, class, iou_thresh)?;
        Ok(Self {
            class: class.to_string(),
            image_ids,
            top_index,
            iterations,
            kappa,
            corloc,
        })
    }

    fn from_col(dataset: &Dataset, class: &str, r: &ColResult, iou_thresh: f64) -> Result<Self> {
        let (ids, top) = (r.image_ids.clone(), r.top_index.clone());
        Self::new(
            dataset,
            class,
            ids,
            top,
            r.iterations,
            Some(r.kappa_final),
            iou_thresh,
        )
    }
}

/// Support-side CorLoc over a run: mean of per-episode means, with a
/// binomial interval over all support images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub corloc_mean: f64,
    pub ci95: f64,
    pub images: usize,
}

pub fn support_summary(outcomes: &[EpisodeOutcome]) -> Option<SupportSummary> {
    let per_episode: Vec<f64> = outcomes
        .iter()
        .filter(|o| !o.support.is_empty())
        .map(|o| o.support.iter().map(|s| s.corloc).sum::<f64>() / o.support.len() as f64)
        .collect();
    if per_episode.is_empty() {
        return None;
    }
    let corloc_mean = per_episode.iter().sum::<f64>() / per_episode.len() as f64;
    let images = outcomes
        .iter()
        .flat_map(|o| &o.support)
        .map(|s| s.image_ids.len())
        .sum();
    Some(SupportSummary {
        corloc_mean,
        ci95: binomial_ci95(corloc_mean, images),
        images,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: u64,
    pub support: Vec<SupportSelection>,
    pub metrics: EpisodeMetrics,
    #[serde(skip)]
    pub detections: Vec<Detection>,
}

pub fn query_records(dataset: &Dataset, episode: &Episode) -> Result<Vec<ImageRecord>> {
    episode
        .query
        .iter()
        .map(|id| dataset.index.get(id).cloned())
        .collect()
}

/// Query records restricted to the episode's target classes.
fn target_records(dataset: &Dataset, episode: &Episode) -> Result<Vec<ImageRecord>> {
    let keep = |l: &String| episode.target_classes.contains(l);
    Ok(query_records(dataset, episode)?
        .into_iter()
        .map(|mut r| {
            r.labels.retain(keep);
            r.gt.retain(|g| keep(&g.label));
            r
        })
        .collect())
}

fn load(dataset: &Dataset, ids: &[String]) -> Result<Vec<ProposalSet>> {
    ids.iter()
        .map(|id| dataset.proposals(id).cloned())
        .collect()
}

fn finish(
    dataset: &Dataset,
    episode: &Episode,
    support: Vec<SupportSelection>,
    detections: Vec<Detection>,
    opts: EvalOptions,
) -> Result<EpisodeOutcome> {
    let metrics = evaluate_episode(dataset, episode, &detections, opts)?;
    Ok(EpisodeOutcome {
        episode: episode.index,
        support,
        metrics,
        detections,
    })
}

/// Metrics of `detections` over the episode's query images and target classes.
pub fn evaluate_episode(
    dataset: &Dataset,
    episode: &Episode,
    detections: &[Detection],
    opts: EvalOptions,
) -> Result<EpisodeMetrics> {
    let classes: BTreeSet<String> = episode.target_classes.iter().cloned().collect();
    evaluate_detections(
        detections,
        &query_records(dataset, episode)?,
        &classes,
        opts,
    )
}

/// COL on each target class's support set, then query scoring with the
/// fitted direction.
pub fn col_episode(
    dataset: &Dataset,
    episode: &Episode,
    bg: &BackgroundModel,
    cfg: &ColConfig,
    detect: &DetectConfig,
    opts: EvalOptions,
) -> Result<(EpisodeOutcome, Vec<ColResult>)> {
    let mut results = Vec::new();
    let mut support = Vec::new();
    let mut detections = Vec::new();
    for shots in &episode.support {
        let r = run_col(cfg, bg, &load(dataset, &shots.images)?)?;
        for id in &episode.query {
            let q = dataset.proposals(id)?;
            let s = score_query_with(
                &cfg.model,
                r.theta().view(),
                r.kappa_final,
                bg,
                cfg.lambda,
                q,
            )?;
            let mut dets = detections_from_scores(
                q,
                &shots.class,
                s.probs.as_slice().expect("contiguous"),
                detect,
            )?;
            dets.iter_mut()
                .for_each(|d| d.episode = Some(episode.index));
            detections.extend(dets);
        }
        support.push(SupportSelection::from_col(
            dataset,
            &shots.class,
            &r,
            opts.iou_thresh,
        )?);
        results.push(r);
    }
    Ok((
        finish(dataset, episode, support, detections, opts)?,
        results,
    ))
}

/// Settings for [`wsod_episode`].
#[derive(Debug, Clone)]
pub struct WsodSettings {
    pub method: Method,
    pub col: ColConfig,
    pub train: TrainConfig,
    pub misvm: MisvmConfig,
    pub detect: DetectConfig,
    pub eval: EvalOptions,
}

pub fn wsod_episode(
    dataset: &Dataset,
    episode: &Episode,
    bg: &BackgroundModel,
    objectness: Option<&ObjectnessScorer>,
    s: &WsodSettings,
) -> Result<EpisodeOutcome> {
    match s.method {
        Method::Vmf | Method::ProtoInit => {
            let mut col = s.col.clone();
            if s.method == Method::ProtoInit {
                col.max_iters = 0;
            }
            let out = run_wsod(dataset, episode, bg, &col, &s.train, &s.detect)?;
            let support = out
                .col_results
                .iter()
                .zip(&episode.support)
                .map(|(r, shots)| {
                    SupportSelection::from_col(dataset, &shots.class, r, s.eval.iou_thresh)
                })
                .collect::<Result<_>>()?;
            finish(dataset, episode, support, out.detections, s.eval)
        }
        Method::Misvm => {
            let obj = objectness
                .ok_or_else(|| Error::InvalidConfig("misvm needs an objectness scorer".into()))?;
            let mut support = Vec::new();
            let mut detections = Vec::new();
            for class in &episode.target_classes {
                let (r, dets) =
                    run_misvm_episode(dataset, episode, class, obj, &s.misvm, &s.detect)?;
                let sel = SupportSelection::new(
                    dataset,
                    class,
                    r.image_ids,
                    r.selections,
                    r.rounds,
                    None,
                    s.eval.iou_thresh,
                )?;
                support.push(sel);
                detections.extend(dets);
            }
            finish(dataset, episode, support, detections, s.eval)
        }
    }
}

/// Run `f` over `episodes` on `workers` threads. Output keeps episode order.
pub fn map_episodes<T, F>(episodes: &[Episode], workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Episode) -> Result<T> + Sync,
{
    if workers <= 1 {
        return episodes.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| episodes.par_iter().map(&f).collect())
}

/// Aggregate outcomes; `None` for an empty run.
pub fn report(
    outcomes: &[EpisodeOutcome],
    pooled: bool,
    dataset: &Dataset,
    episodes: &[Episode],
    opts: EvalOptions,
) -> Result<Option<MetricsReport>> {
    if outcomes.is_empty() {
        return Ok(None);
    }
    if pooled {
        let sets = outcomes
            .iter()
            .zip(episodes)
            .map(|(o, ep)| {
                Ok((
                    o.episode,
                    o.detections.clone(),
                    target_records(dataset, ep)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        MetricsReport::pooled(&sets, opts).map(Some)
    } else {
        let metrics: Vec<EpisodeMetrics> = outcomes.iter().map(|o| o.metrics.clone()).collect();
        MetricsReport::from_episodes(&metrics).map(Some)
    }
}
