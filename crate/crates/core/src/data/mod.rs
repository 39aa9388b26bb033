//! Synthetic and on-disk episodic datasets.

pub mod augment;
pub mod external;
pub mod image;
pub mod shapes;
pub mod split;
pub mod synthetic;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::augment::{augment, permute_channels, AugmentConfig, AugmentPlan};
pub use self::external::{export_dataset, load_external_dataset, ExternalClass};
pub use self::image::Image;
pub use self::shapes::ShapeFamily;
pub use self::split::{build_splits, Partition, SplitConfig};
pub use self::synthetic::{default_catalog, ClassSpec, Renderer};

use crate::error::{Error, Result};
use crate::math::BinaryMask;

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: BinaryMask,
    pub class_id: usize,
}

/// `k` annotated support samples and one query, all of the same class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<Sample>,
    pub query: Sample,
    pub class_id: usize,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }
}

#[derive(Clone, Debug)]
pub enum DatasetSource {
    Synthetic(Renderer),
    External(Vec<ExternalClass>),
}

/// Read-only handle over a dataset; shareable between workers.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub source: DatasetSource,
    pub height: usize,
    pub width: usize,
}

/// Serializable description of a dataset for run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetDescriptor {
    Synthetic {
        height: usize,
        width: usize,
        classes: usize,
    },
    External {
        root: String,
        height: usize,
        width: usize,
        classes: Vec<(String, usize)>,
    },
}

impl DatasetHandle {
    pub fn synthetic(renderer: Renderer) -> Self {
        DatasetHandle {
            height: renderer.height,
            width: renderer.width,
            source: DatasetSource::Synthetic(renderer),
        }
    }

    /// The twelve-class synthetic dataset at `size x size`.
    pub fn default_synthetic(size: usize) -> Result<Self> {
        Self::default_synthetic_sized(size, size)
    }

    pub fn default_synthetic_sized(height: usize, width: usize) -> Result<Self> {
        Ok(Self::synthetic(Renderer::new(height, width, default_catalog())?))
    }

    pub fn class_ids(&self) -> Vec<usize> {
        match &self.source {
            DatasetSource::Synthetic(r) => r.class_ids(),
            DatasetSource::External(classes) => classes.iter().map(|c| c.class_id).collect(),
        }
    }

    /// Number of stored samples per class (`None` for on-demand sources).
    pub fn inventory(&self) -> Option<Vec<(usize, usize)>> {
        match &self.source {
            DatasetSource::Synthetic(_) => None,
            DatasetSource::External(classes) => {
                Some(classes.iter().map(|c| (c.class_id, c.samples.len())).collect())
            }
        }
    }

    pub fn descriptor(&self, root: Option<&str>) -> DatasetDescriptor {
        match &self.source {
            DatasetSource::Synthetic(r) => DatasetDescriptor::Synthetic {
                height: self.height,
                width: self.width,
                classes: r.catalog.len(),
            },
            DatasetSource::External(classes) => DatasetDescriptor::External {
                root: root.unwrap_or_default().to_string(),
                height: self.height,
                width: self.width,
                classes: classes.iter().map(|c| (c.name.clone(), c.samples.len())).collect(),
            },
        }
    }
}

/// Draws one episode: a uniformly chosen class of `partition`, `k` support
/// samples and one query, all distinct.
pub fn sample_episode(
    ds: &DatasetHandle,
    split: &SplitConfig,
    partition: Partition,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument("episodes need k >= 1".into()));
    }
    let classes = split.classes(partition);
    if classes.is_empty() {
        return Err(Error::InvalidArgument(format!("{partition:?} partition has no classes")));
    }
    let class_id = classes[rng.random_range(0..classes.len())];
    let mut samples = match &ds.source {
        DatasetSource::Synthetic(renderer) => {
            let spec = renderer.spec(class_id).ok_or_else(|| {
                Error::InvalidArgument(format!("class {class_id} not in the synthetic catalog"))
            })?;
            (0..=k)
                .map(|_| renderer.render_sample(spec, rng))
                .collect::<Result<Vec<_>>>()?
        }
        DatasetSource::External(stored) => {
            let class = stored
                .iter()
                .find(|c| c.class_id == class_id)
                .ok_or_else(|| Error::InvalidArgument(format!("class {class_id} not in dataset")))?;
            if class.samples.len() < k + 1 {
                return Err(Error::Dataset {
                    path: class.path.clone(),
                    reason: format!(
                        "class `{}` has {} samples, episode needs {}",
                        class.name,
                        class.samples.len(),
                        k + 1
                    ),
                });
            }
            let picks = rand::seq::index::sample(rng, class.samples.len(), k + 1);
            picks.iter().map(|i| class.samples[i].clone()).collect()
        }
    };
    let query = samples.pop().expect("k + 1 samples");
    Ok(Episode {
        support: samples,
        query,
        class_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn one_shot_episode_shape() {
        let ds = DatasetHandle::default_synthetic(32).unwrap();
        let split = build_splits(&ds.class_ids(), 4, 0).unwrap();
        let ep = sample_episode(&ds, &split, Partition::Train, 1, &mut stream(1, 0)).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert_eq!(ep.query.class_id, ep.class_id);
        assert_ne!(ep.support[0].image, ep.query.image);
        assert!(sample_episode(&ds, &split, Partition::Train, 0, &mut stream(1, 0)).is_err());
    }

    #[test]
    fn test_partition_never_leaks_train_classes() {
        let ds = DatasetHandle::default_synthetic(16).unwrap();
        let split = build_splits(&ds.class_ids(), 4, 2).unwrap();
        let mut rng = stream(4, 0);
        for _ in 0..10_000 {
            // Class choice only: avoid rendering by drawing from the split directly.
            let classes = split.classes(Partition::Test);
            let c = classes[rng.random_range(0..classes.len())];
            assert!(!split.train_classes.contains(&c));
        }
        for _ in 0..200 {
            let ep = sample_episode(&ds, &split, Partition::Test, 2, &mut rng).unwrap();
            assert!(split.test_classes.contains(&ep.class_id));
            assert!(ep.support.iter().all(|s| s.class_id == ep.class_id));
        }
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let ids: Vec<usize> = (0..16).collect();
        let split = build_splits(&ids, 4, 1).unwrap();
        let catalog: Vec<ClassSpec> = default_catalog()
            .into_iter()
            .cycle()
            .take(16)
            .enumerate()
            .map(|(i, mut c)| {
                c.class_id = i;
                c
            })
            .collect();
        let ds = DatasetHandle::synthetic(Renderer::new(16, 16, catalog).unwrap());
        let n = 10_000;
        let mut counts = std::collections::BTreeMap::new();
        let mut rng = stream(77, 0);
        for _ in 0..n {
            let ep = sample_episode(&ds, &split, Partition::Test, 1, &mut rng).unwrap();
            *counts.entry(ep.class_id).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 4);
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (_, c) in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{c}");
        }
    }
}
