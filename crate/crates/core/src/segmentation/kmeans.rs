use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MaskOrigin, PromptGrid, RegionMask, SegmenterBackend};
use crate::error::{Error, Result};
use crate::image::{Bitmap, Image};

/// Weight-free fallback: k-means colour quantization followed by 4-connected
/// component extraction. Components with no interior pixel (anti-aliased
/// edges, thin rings) are absorbed into the adjacent region nearest in mean
/// colour, so object masks keep their blended borders. Prompts are ignored.
#[derive(Clone, Debug)]
pub struct KMeansSegmenter {
    pub clusters: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Pixels used to fit the centers; larger images are strided down.
    pub max_samples: usize,
    /// Components smaller than this are dropped (they end up in the residual).
    pub min_area: usize,
    pub absorb_thin: bool,
}

impl Default for KMeansSegmenter {
    fn default() -> Self {
        Self { clusters: 8, seed: 0, max_iters: 20, max_samples: 16_384, min_area: 1, absorb_thin: true }
    }
}

impl KMeansSegmenter {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Cluster index per pixel.
    pub fn quantize(&self, image: &Image<f32>) -> Vec<usize> {
        let pixels: Vec<[f64; 3]> =
            image.data().chunks_exact(3).map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]).collect();
        let step = pixels.len().div_ceil(self.max_samples.max(1)).max(1);
        let samples: Vec<[f64; 3]> = pixels.iter().step_by(step).copied().collect();
        let centers = self.fit(&samples);
        pixels.iter().map(|p| nearest(&centers, p)).collect()
    }

    fn fit(&self, samples: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut centers = vec![samples[rng.random_range(0..samples.len())]];
        let mut d2: Vec<f64> = samples.iter().map(|p| dist2(p, &centers[0])).collect();
        while centers.len() < self.clusters.max(1) {
            let total: f64 = d2.iter().sum();
            if total <= 0.0 {
                break;
            }
            let mut target = rng.random::<f64>() * total;
            let mut pick = samples.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            let c = samples[pick];
            for (d, p) in d2.iter_mut().zip(samples) {
                *d = d.min(dist2(p, &c));
            }
            centers.push(c);
        }

        for _ in 0..self.max_iters {
            let mut sums = vec![[0.0f64; 4]; centers.len()];
            for p in samples {
                let s = &mut sums[nearest(&centers, p)];
                s[0] += p[0];
                s[1] += p[1];
                s[2] += p[2];
                s[3] += 1.0;
            }
            let next: Vec<[f64; 3]> =
                sums.iter().filter(|s| s[3] > 0.0).map(|s| [s[0] / s[3], s[1] / s[3], s[2] / s[3]]).collect();
            if next == centers {
                break;
            }
            centers = next;
        }
        centers
    }
}

impl SegmenterBackend for KMeansSegmenter {
    fn name(&self) -> &str {
        "kmeans"
    }

    fn segment(&self, image: &Image<f32>, _prompts: &PromptGrid) -> Result<Vec<RegionMask>> {
        if image.pixel_count() == 0 {
            return Err(Error::param("cannot segment an empty image"));
        }
        let labels = self.quantize(image);
        let mut comps = connected_components(&labels, image.width(), image.height());
        if self.absorb_thin {
            comps = absorb_thin(comps, image);
        }
        Ok(comps
            .into_iter()
            .filter(|b| b.count() >= self.min_area)
            .enumerate()
            .map(|(i, b)| RegionMask::new(i as u32, b, MaskOrigin::Raw(i)))
            .collect())
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(centers: &[[f64; 3]], p: &[f64; 3]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn has_interior(b: &Bitmap) -> bool {
    let (w, h) = (b.width(), b.height());
    b.iter_set().any(|(x, y)| {
        x > 0 && y > 0 && x + 1 < w && y + 1 < h && (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| b.get(xx, yy)))
    })
}

/// Grows the components that have an interior over the remaining pixels,
/// breadth-first; each pixel joins the adjacent grown region whose seed mean
/// colour is nearest.
fn absorb_thin(comps: Vec<Bitmap>, image: &Image<f32>) -> Vec<Bitmap> {
    let (w, h) = (image.width(), image.height());
    let (seeds, _): (Vec<Bitmap>, Vec<Bitmap>) = comps.iter().cloned().partition(has_interior);
    if seeds.is_empty() || seeds.len() == comps.len() {
        return comps;
    }
    let color = |i: usize| {
        let p = image.get(i % w, i / w);
        [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]
    };
    let mut owner = vec![usize::MAX; w * h];
    let mut means = Vec::with_capacity(seeds.len());
    for (s, b) in seeds.iter().enumerate() {
        let mut acc = [0.0; 3];
        for (x, y) in b.iter_set() {
            owner[y * w + x] = s;
            let c = color(y * w + x);
            for k in 0..3 {
                acc[k] += c[k];
            }
        }
        means.push(acc.map(|v| v / b.count() as f64));
    }
    let neighbors = |i: usize| {
        let (x, y) = (i % w, i / w);
        [(x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1), (y > 0).then(|| i - w), (y + 1 < h).then(|| i + w)]
            .into_iter()
            .flatten()
    };
    let mut queue: std::collections::VecDeque<usize> =
        (0..w * h).filter(|&i| owner[i] == usize::MAX && neighbors(i).any(|j| owner[j] != usize::MAX)).collect();
    while let Some(i) = queue.pop_front() {
        if owner[i] != usize::MAX {
            continue;
        }
        let c = color(i);
        let best = neighbors(i)
            .filter_map(|j| (owner[j] != usize::MAX).then_some(owner[j]))
            .min_by(|&a, &b| dist2(&means[a], &c).total_cmp(&dist2(&means[b], &c)).then(a.cmp(&b)));
        if let Some(s) = best {
            owner[i] = s;
            queue.extend(neighbors(i).filter(|&j| owner[j] == usize::MAX));
        }
    }
    let mut out = vec![Bitmap::new(w, h); seeds.len()];
    for (i, &s) in owner.iter().enumerate() {
        out[s].set(i % w, i / w, true);
    }
    out
}

/// 4-connected components of equal labels, ordered by first pixel in raster order.
pub(crate) fn connected_components(labels: &[usize], width: usize, height: usize) -> Vec<Bitmap> {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut bitmap = Bitmap::new(width, height);
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            bitmap.set(x, y, true);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == labels[i] {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        out.push(bitmap);
    }
    out
}
