use super::{FeatureStore, ImageFeatures};
use crate::error::{Error, Result};
use crate::rng::SaffRng;

/// An N-way K-shot task. Images are referenced by index into the store they
/// were sampled from; support and query lists are class-major, and the
/// episode label of class `classes[i]` is `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Store labels of the sampled classes, in episode-label order.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn support_images<'a>(&'a self, store: &'a FeatureStore) -> impl Iterator<Item = &'a ImageFeatures> {
        self.support.iter().map(|&i| &store.images[i])
    }

    pub fn query_images<'a>(&'a self, store: &'a FeatureStore) -> impl Iterator<Item = &'a ImageFeatures> {
        self.query.iter().map(|&i| &store.images[i])
    }
}

/// Per-class image index of a store, built once and reused across episodes.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    /// (store label, image indices) for every class with at least one image.
    by_class: Vec<(usize, Vec<usize>)>,
}

impl EpisodeSampler {
    pub fn new(store: &FeatureStore) -> Self {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); store.n_classes()];
        for (i, img) in store.images.iter().enumerate() {
            lists[img.label].push(i);
        }
        EpisodeSampler {
            by_class: lists
                .into_iter()
                .enumerate()
                .filter(|(_, imgs)| !imgs.is_empty())
                .collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Draws N classes without replacement, then K + Q distinct images from
    /// each: the first K become support, the rest query.
    pub fn sample(&self, n_way: usize, k_shot: usize, q_per_class: usize, rng: &mut SaffRng) -> Result<Episode> {
        if n_way == 0 || k_shot == 0 || q_per_class == 0 {
            return Err(Error::usage("episodes need n_way, k_shot and q_per_class >= 1"));
        }
        if self.by_class.len() < n_way {
            return Err(Error::InsufficientData(format!(
                "{n_way}-way episodes need {n_way} classes, store has {}",
                self.by_class.len()
            )));
        }
        let need = k_shot + q_per_class;
        if let Some((label, imgs)) = self.by_class.iter().find(|(_, imgs)| imgs.len() < need) {
            return Err(Error::InsufficientData(format!(
                "class {label} has {} images, {k_shot}-shot with {q_per_class} queries needs {need}",
                imgs.len()
            )));
        }

        let picked = rng.choose_distinct(self.by_class.len(), n_way);
        let mut ep = Episode {
            n_way,
            k_shot,
            q_per_class,
            classes: Vec::with_capacity(n_way),
            support: Vec::with_capacity(n_way * k_shot),
            query: Vec::with_capacity(n_way * q_per_class),
            query_labels: Vec::with_capacity(n_way * q_per_class),
        };
        for (episode_label, &c) in picked.iter().enumerate() {
            let (label, imgs) = &self.by_class[c];
            let chosen = rng.choose_distinct(imgs.len(), need);
            ep.classes.push(*label);
            ep.support.extend(chosen[..k_shot].iter().map(|&j| imgs[j]));
            ep.query.extend(chosen[k_shot..].iter().map(|&j| imgs[j]));
            ep.query_labels.extend(std::iter::repeat_n(episode_label, q_per_class));
        }
        Ok(ep)
    }
}

pub fn sample_episode(
    store: &FeatureStore,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    rng: &mut SaffRng,
) -> Result<Episode> {
    EpisodeSampler::new(store).sample(n_way, k_shot, q_per_class, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use std::collections::HashSet;

    fn store(n_classes: usize, per_class: usize) -> FeatureStore {
        generate_synthetic(&SynthConfig {
            n_classes,
            test_classes: 0,
            images_per_class: per_class,
            n_patches: 2,
            dim: 2,
            relevant_fraction: 0.5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn exhaustive_episode_uses_every_image_once() {
        let s = store(4, 5);
        let ep = sample_episode(&s, 4, 2, 3, &mut SaffRng::new(1)).unwrap();
        let mut all: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_given_seed() {
        let s = store(6, 8);
        let a = sample_episode(&s, 3, 2, 2, &mut SaffRng::new(9)).unwrap();
        let b = sample_episode(&s, 3, 2, 2, &mut SaffRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn structure_and_disjointness() {
        let s = store(6, 8);
        let mut rng = SaffRng::new(4);
        for _ in 0..200 {
            let ep = sample_episode(&s, 3, 2, 4, &mut rng).unwrap();
            let sup: HashSet<_> = ep.support.iter().collect();
            assert!(ep.query.iter().all(|q| !sup.contains(q)));
            for (i, &c) in ep.classes.iter().enumerate() {
                let ns = ep.support.iter().filter(|&&j| s.images[j].label == c).count();
                let nq = ep.query.iter().filter(|&&j| s.images[j].label == c).count();
                assert_eq!((ns, nq), (2, 4));
                assert_eq!(&ep.query_labels[i * 4..(i + 1) * 4], &[i; 4]);
            }
        }
    }

    #[test]
    fn insufficient_data_errors() {
        let s = store(3, 4);
        let mut rng = SaffRng::new(0);
        assert!(matches!(sample_episode(&s, 4, 1, 1, &mut rng), Err(Error::InsufficientData(_))));
        assert!(matches!(sample_episode(&s, 2, 2, 3, &mut rng), Err(Error::InsufficientData(_))));
        assert!(sample_episode(&s, 2, 0, 3, &mut rng).is_err());
    }
}
