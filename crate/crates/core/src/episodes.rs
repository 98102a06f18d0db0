//! N-way K-shot episode sampling over the novel classes.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::DatasetIndex;
use crate::error::{Error, Result};

/// Support images of one target class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassShots {
    pub class: String,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Position in the benchmark stream.
    pub index: u64,
    /// Seed the episode was drawn from.
    pub seed: u64,
    pub target_classes: Vec<String>,
    pub support: Vec<ClassShots>,
    pub query: Vec<String>,
    /// Per class, `K` images without the class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_negatives: Option<Vec<ClassShots>>,
}

impl Episode {
    pub fn support_of(&self, class: &str) -> Option<&[String]> {
        self.support
            .iter()
            .find(|s| s.class == class)
            .map(|s| s.images.as_slice())
    }

    pub fn negatives_of(&self, class: &str) -> Option<&[String]> {
        self.extra_negatives
            .as_ref()?
            .iter()
            .find(|s| s.class == class)
            .map(|s| s.images.as_slice())
    }
}

/// Episode shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub num_query: usize,
    pub extra_negatives: bool,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::InvalidConfig(format!(
                "N and K must be >= 1, got N={} K={}",
                self.n_way, self.k_shot
            )));
        }
        Ok(())
    }
}

fn pick<'a, R: Rng + ?Sized>(pool: &[&'a str], n: usize, rng: &mut R) -> Vec<&'a str> {
    sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Draw one episode. Classes and images are drawn uniformly without
/// replacement; the query holds up to `num_query` images that contain a
/// target class and are not in the support.
pub fn sample_episode<R: Rng + ?Sized>(
    index: &DatasetIndex,
    spec: EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    let images_of = |class: &str| -> Vec<&str> {
        index
            .records
            .iter()
            .filter(|r| r.has_label(class))
            .map(|r| r.image_id.as_str())
            .collect()
    };
    let eligible: Vec<&str> = index
        .novel_classes
        .iter()
        .map(String::as_str)
        .filter(|c| images_of(c).len() >= spec.k_shot)
        .collect();
    if eligible.len() < spec.n_way {
        let short = index
            .novel_classes
            .iter()
            .find(|c| images_of(c).len() < spec.k_shot);
        return Err(match short {
            Some(c) => Error::Capacity {
                class: c.clone(),
                needed: spec.k_shot,
                available: images_of(c).len(),
            },
            None => Error::Capacity {
                class: "<novel classes>".into(),
                needed: spec.n_way,
                available: index.novel_classes.len(),
            },
        });
    }

    let targets = pick(&eligible, spec.n_way, rng);
    let mut support = Vec::with_capacity(targets.len());
    let mut used: BTreeSet<&str> = BTreeSet::new();
    for &class in &targets {
        let chosen = pick(&images_of(class), spec.k_shot, rng);
        used.extend(chosen.iter().copied());
        support.push(ClassShots {
            class: class.to_string(),
            images: chosen.iter().map(|s| s.to_string()).collect(),
        });
    }

    let query_pool: Vec<&str> = index
        .records
        .iter()
        .filter(|r| !used.contains(r.image_id.as_str()) && targets.iter().any(|c| r.has_label(c)))
        .map(|r| r.image_id.as_str())
        .collect();
    let query = pick(&query_pool, spec.num_query.min(query_pool.len()), rng);

    let extra_negatives = if spec.extra_negatives {
        let mut all = Vec::with_capacity(targets.len());
        for &class in &targets {
            let pool: Vec<&str> = index
                .records
                .iter()
                .filter(|r| {
                    !r.has_label(class)
                        && r.labels.iter().any(|l| index.is_novel(l))
                        && !used.contains(r.image_id.as_str())
                        && !query.contains(&r.image_id.as_str())
                })
                .map(|r| r.image_id.as_str())
                .collect();
            if pool.len() < spec.k_shot {
                return Err(Error::Capacity {
                    class: format!("{class} (negatives)"),
                    needed: spec.k_shot,
                    available: pool.len(),
                });
            }
            let chosen = pick(&pool, spec.k_shot, rng);
            all.push(ClassShots {
                class: class.to_string(),
                images: chosen.iter().map(|s| s.to_string()).collect(),
            });
        }
        Some(all)
    } else {
        None
    };

    Ok(Episode {
        index: 0,
        seed: 0,
        target_classes: targets.iter().map(|s| s.to_string()).collect(),
        support,
        query: query.iter().map(|s| s.to_string()).collect(),
        extra_negatives,
    })
}

/// SplitMix64 finalizer; a bijection on `u64`.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of episode `i` under benchmark seed `seed`; distinct for distinct `i`.
pub fn episode_seed(seed: u64, i: u64) -> u64 {
    mix64(mix64(seed).wrapping_add(i.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Lazily generated sequence of independent episodes.
#[derive(Debug, Clone)]
pub struct Benchmark<'a> {
    index: &'a DatasetIndex,
    spec: EpisodeSpec,
    seed: u64,
    num_episodes: u64,
    next: u64,
}

impl<'a> Benchmark<'a> {
    pub fn len(&self) -> u64 {
        self.num_episodes
    }

    pub fn is_empty(&self) -> bool {
        self.num_episodes == 0
    }

    /// Episode `i`, independent of any other episode.
    pub fn episode(&self, i: u64) -> Result<Episode> {
        let seed = episode_seed(self.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ep = sample_episode(self.index, self.spec, &mut rng)?;
        ep.index = i;
        ep.seed = seed;
        Ok(ep)
    }
}

impl Iterator for Benchmark<'_> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.num_episodes {
            return None;
        }
        let ep = self.episode(self.next);
        self.next += 1;
        Some(ep)
    }
}

pub fn sample_benchmark(
    index: &DatasetIndex,
    spec: EpisodeSpec,
    num_episodes: u64,
    seed: u64,
) -> Benchmark<'_> {
    Benchmark {
        index,
        spec,
        seed,
        num_episodes,
        next: 0,
    }
}

pub fn write_episodes(episodes: &[Episode], path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(episodes)?)?;
    Ok(())
}

/// Read a replay file and check every referenced image exists.
pub fn read_episodes(path: &Path, index: &DatasetIndex) -> Result<Vec<Episode>> {
    let episodes: Vec<Episode> = serde_json::from_str(&fs::read_to_string(path)?)?;
    for ep in &episodes {
        let shots = ep.support.iter().chain(ep.extra_negatives.iter().flatten());
        for id in shots.flat_map(|s| s.images.iter()).chain(ep.query.iter()) {
            index.get(id)?;
        }
    }
    Ok(episodes)
}
