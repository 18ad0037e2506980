//! Deterministic multi-domain, partially labelled synthetic data.
//!
//! Every image is a sum of three parts with disjoint spectral support:
//! a domain style (DC offset + smooth ramp + gained noise, all low-passed
//! below the 0.15 cutoff), the high-passed motifs of whichever tasks are
//! positive, and white pixel noise. Domain identity therefore lives in the
//! low frequencies and task evidence in the high frequencies. The held-out
//! domain's style parameters sit outside the range spanned by the training
//! domains.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{PartialLabels, NEGATIVE, POSITIVE, UNKNOWN};
use crate::tensor::{low_pass, Tensor};

/// Spectral boundary between "style" and "task" content, as a fraction of
/// each frequency axis.
pub const STYLE_CUTOFF: f64 = 0.15;

/// Standard deviation of the white pixel noise.
pub const PIXEL_NOISE: f64 = 0.05;

/// Low-frequency style of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    pub mean_offset: f64,
    /// Ramp slope along (rows, cols), total swing across the image.
    pub gradient: (f64, f64),
    pub noise_gain: f64,
}

/// High-frequency texture template of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMotif {
    pub id: usize,
    pub orientation: f64,
    /// Cycles across the full image along the orientation.
    pub cycles: f64,
    /// Patch center (row, col) and side length.
    pub center: (usize, usize),
    pub patch: usize,
    pub contrast: f64,
}

impl TaskMotif {
    /// Rendered template, high-passed so its energy sits above the cutoff.
    pub fn field(&self, size: usize) -> Tensor {
        let mut data = vec![0.0; size * size];
        let half = self.patch as f64 / 2.0;
        let (cy, cx) = (self.center.0 as f64, self.center.1 as f64);
        let (s, c) = self.orientation.sin_cos();
        for i in 0..size {
            for j in 0..size {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                if dy.abs() > half || dx.abs() > half {
                    continue;
                }
                // Raised-cosine window keeps patch edges from ringing.
                let wy = 0.5 * (1.0 + (std::f64::consts::PI * dy / half).cos());
                let wx = 0.5 * (1.0 + (std::f64::consts::PI * dx / half).cos());
                let phase = 2.0 * std::f64::consts::PI * self.cycles
                    * (c * j as f64 + s * i as f64)
                    / size as f64;
                data[i * size + j] = self.contrast * wy * wx * phase.cos();
            }
        }
        let raw = Tensor::new(vec![1, size, size], data).expect("shape consistent");
        let low = low_pass(&raw, STYLE_CUTOFF);
        let hp: Vec<f64> = raw.data().iter().zip(low.data()).map(|(a, b)| a - b).collect();
        Tensor::new(vec![1, size, size], hp).expect("shape consistent")
    }
}

/// One generated dataset: images, labels, and which tasks carry labels.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub name: String,
    pub domain: usize,
    /// `[N, 1, S, S]`
    pub images: Tensor,
    pub labels: PartialLabels,
    pub labelled_tasks: Vec<usize>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// View of sample `i` as `[1, S, S]`.
    pub fn image(&self, i: usize) -> Tensor {
        let s = self.images.shape();
        let (size, plane) = (s[2], s[2] * s[3]);
        Tensor::new(
            vec![1, size, size],
            self.images.data()[i * plane..(i + 1) * plane].to_vec(),
        )
        .expect("shape consistent")
    }
}

/// Everything one experiment needs: training sets, matching same-domain
/// test sets, and the fully labelled held-out-domain test set.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train: Vec<SyntheticDataset>,
    pub in_domain_test: Vec<SyntheticDataset>,
    pub ood_test: SyntheticDataset,
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub domains: usize,
    pub tasks: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub image_size: usize,
    /// Task ids labelled in each training dataset.
    pub label_subsets: Vec<Vec<usize>>,
    pub style_offset: f64,
    pub style_gradient: f64,
    pub style_noise: f64,
    /// How far outside the training range the held-out style sits.
    pub ood_factor: f64,
    pub motif_contrast: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            domains: 4,
            tasks: 4,
            n_train: 200,
            n_test: 100,
            n_ood: 200,
            image_size: 64,
            label_subsets: vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 0]],
            style_offset: 0.8,
            style_gradient: 0.8,
            style_noise: 0.5,
            ood_factor: 2.0,
            motif_contrast: 1.0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 1 {
            return Err(Error::InvalidArg("need at least one training domain".into()));
        }
        if self.tasks < 1 {
            return Err(Error::InvalidArg("need at least one task".into()));
        }
        if self.label_subsets.len() != self.domains {
            return Err(Error::InvalidArg(format!(
                "{} label subsets for {} training datasets",
                self.label_subsets.len(),
                self.domains
            )));
        }
        for (k, s) in self.label_subsets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidArg(format!("dataset {k} labels no task")));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.tasks) {
                return Err(Error::InvalidArg(format!("dataset {k} labels task {bad} >= T")));
            }
        }
        for t in 0..self.tasks {
            if !self.label_subsets.iter().any(|s| s.contains(&t)) {
                return Err(Error::InvalidArg(format!("task {t} has no labelled source")));
            }
        }
        if self.n_train == 0 {
            return Err(Error::InvalidArg("empty training datasets".into()));
        }
        Ok(())
    }

    /// Style of training domain `k`.
    pub fn domain_spec(&self, k: usize) -> DomainSpec {
        let kk = self.domains.max(2) - 1;
        let frac = k as f64 / kk as f64; // 0..1 across training domains
        let angle = 2.0 * std::f64::consts::PI * k as f64 / self.domains as f64;
        DomainSpec {
            id: k,
            mean_offset: self.style_offset * (2.0 * frac - 1.0),
            gradient: (
                self.style_gradient * (0.4 + 0.6 * frac) * angle.sin(),
                self.style_gradient * (0.4 + 0.6 * frac) * angle.cos(),
            ),
            noise_gain: self.style_noise * (0.3 + 0.7 * frac),
        }
    }

    /// Held-out style: every coordinate extrapolated beyond the training
    /// range by `ood_factor`.
    pub fn ood_spec(&self) -> DomainSpec {
        let angle = std::f64::consts::PI / 3.0;
        DomainSpec {
            id: self.domains,
            mean_offset: self.style_offset * self.ood_factor,
            gradient: (
                self.style_gradient * self.ood_factor * angle.sin(),
                -self.style_gradient * self.ood_factor * angle.cos(),
            ),
            noise_gain: self.style_noise * self.ood_factor,
        }
    }

    /// Motif of task `t`: orientation, frequency, and patch position all
    /// depend on `t` so templates stay mutually distinguishable.
    pub fn motif(&self, t: usize) -> TaskMotif {
        let size = self.image_size;
        let angle = 2.0 * std::f64::consts::PI * (t as f64 + 0.5) / self.tasks as f64;
        let ring = size as f64 * 0.22;
        TaskMotif {
            id: t,
            orientation: std::f64::consts::PI * t as f64 / self.tasks as f64,
            cycles: size as f64 * (0.25 + 0.03 * t as f64),
            center: (
                (size as f64 / 2.0 + ring * angle.sin()).round() as usize,
                (size as f64 / 2.0 + ring * angle.cos()).round() as usize,
            ),
            patch: (size as f64 * 0.45).round() as usize,
            contrast: self.motif_contrast,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Mix independent tags into a single derived seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut x = master ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x ^= t.wrapping_mul(0xbf58_476d_1ce4_e5b9).wrapping_add(0x94d0_49bb_1331_11eb);
        // splitmix64 finalizer
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

const TAG_LABELS: u64 = 1;
const TAG_IMAGE: u64 = 2;

/// Render one sample given its task-presence bits.
pub fn render_sample(
    spec: &GeneratorSpec,
    domain: &DomainSpec,
    motifs: &[Tensor],
    presence: &[bool],
    sample_seed: u64,
) -> Tensor {
    let size = spec.image_size;
    let n = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);

    // Style: offset + ramp + gained noise, low-passed as a whole.
    let mut style = vec![0.0; n];
    for i in 0..size {
        for j in 0..size {
            let fy = i as f64 / size as f64 - 0.5;
            let fx = j as f64 / size as f64 - 0.5;
            style[i * size + j] = domain.mean_offset
                + domain.gradient.0 * fy
                + domain.gradient.1 * fx
                + domain.noise_gain * normal(&mut rng);
        }
    }
    let style = low_pass(
        &Tensor::new(vec![1, size, size], style).expect("shape consistent"),
        STYLE_CUTOFF,
    );

    let mut data = style.into_data();
    for (t, &present) in presence.iter().enumerate() {
        if present {
            for (d, m) in data.iter_mut().zip(motifs[t].data()) {
                *d += m;
            }
        }
    }
    for d in data.iter_mut() {
        *d += PIXEL_NOISE * normal(&mut rng);
        // Images round-trip through the f32 dump format; quantize here so a
        // reloaded dataset is bit-identical to the generated one.
        *d = *d as f32 as f64;
    }
    Tensor::new(vec![1, size, size], data).expect("shape consistent")
}

fn build_dataset(
    spec: &GeneratorSpec,
    seed: u64,
    name: &str,
    domain: &DomainSpec,
    motifs: &[Tensor],
    n: usize,
    labelled: &[usize],
    split_tag: u64,
) -> Result<SyntheticDataset> {
    let size = spec.image_size;
    let t = spec.tasks;
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n * t);
    for i in 0..n {
        let label_seed = derive_seed(seed, &[TAG_LABELS, domain.id as u64, split_tag, i as u64]);
        let mut lrng = ChaCha8Rng::seed_from_u64(label_seed);
        let presence: Vec<bool> = (0..t).map(|_| lrng.gen::<f64>() < 0.5).collect();
        let image_seed = derive_seed(seed, &[TAG_IMAGE, domain.id as u64, split_tag, i as u64]);
        let img = render_sample(spec, domain, motifs, &presence, image_seed);
        images.extend_from_slice(img.data());
        for ti in 0..t {
            labels.push(if labelled.contains(&ti) {
                if presence[ti] {
                    POSITIVE
                } else {
                    NEGATIVE
                }
            } else {
                UNKNOWN
            });
        }
    }
    Ok(SyntheticDataset {
        name: name.to_string(),
        domain: domain.id,
        images: Tensor::new(vec![n, 1, size, size], images)?,
        labels: PartialLabels::new(n, t, labels)?,
        labelled_tasks: labelled.to_vec(),
    })
}

/// Generate training datasets (one per domain, each with its matching
/// same-domain test set) plus the fully labelled held-out-domain test set.
pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<GeneratedData> {
    spec.validate()?;
    let motifs: Vec<Tensor> = (0..spec.tasks)
        .map(|t| spec.motif(t).field(spec.image_size))
        .collect();
    let all_tasks: Vec<usize> = (0..spec.tasks).collect();

    let mut train = Vec::new();
    let mut in_domain_test = Vec::new();
    for k in 0..spec.domains {
        let d = spec.domain_spec(k);
        train.push(build_dataset(
            spec,
            seed,
            &format!("train_{k}"),
            &d,
            &motifs,
            spec.n_train,
            &spec.label_subsets[k],
            0,
        )?);
        in_domain_test.push(build_dataset(
            spec,
            seed,
            &format!("test_{k}"),
            &d,
            &motifs,
            spec.n_test,
            &spec.label_subsets[k],
            1,
        )?);
    }
    let ood = spec.ood_spec();
    let ood_test = build_dataset(spec, seed, "ood", &ood, &motifs, spec.n_ood, &all_tasks, 2)?;
    Ok(GeneratedData {
        train,
        in_domain_test,
        ood_test,
    })
}

// ---- dataset dump ----
//
// Directory layout: one subdirectory per dataset holding `images.bin`
// (tensor serialization, [N,1,S,S]) and `labels.txt` with one row per
// sample: the domain id followed by T entries from {1, 0, -1}. A top-level
// `manifest.txt` lists the datasets and their roles.

impl SyntheticDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut img = Vec::new();
        crate::tensor::write_tensor(&mut img, &self.images)?;
        std::fs::write(dir.join("images.bin"), img)?;
        let mut text = String::new();
        for b in 0..self.labels.batch() {
            text.push_str(&self.domain.to_string());
            for t in 0..self.labels.tasks() {
                text.push(' ');
                text.push_str(&self.labels.get(b, t).to_string());
            }
            text.push('\n');
        }
        std::fs::write(dir.join("labels.txt"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<SyntheticDataset> {
        let bytes = std::fs::read(dir.join("images.bin"))?;
        let images = crate::tensor::read_tensor(&mut bytes.as_slice())?;
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "{}: images must be [N,1,S,S], got {:?}",
                dir.display(),
                images.shape()
            )));
        }
        let text = std::fs::read_to_string(dir.join("labels.txt"))?;
        let mut rows: Vec<i8> = Vec::new();
        let mut domain = 0usize;
        let mut tasks = 0usize;
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            domain = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("labels.txt line {ln}: missing domain")))?;
            let vals: Vec<i8> = it
                .map(|s| s.parse::<i8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("labels.txt line {ln}: bad label")))?;
            if tasks == 0 {
                tasks = vals.len();
            } else if vals.len() != tasks {
                return Err(Error::Config(format!("labels.txt line {ln}: ragged row")));
            }
            rows.extend(vals);
        }
        let n = images.shape()[0];
        let labels = PartialLabels::new(n, tasks, rows)?;
        let labelled_tasks: Vec<usize> = (0..tasks)
            .filter(|&t| (0..n).any(|b| labels.get(b, t) != UNKNOWN))
            .collect();
        Ok(SyntheticDataset {
            name: name.to_string(),
            domain,
            images,
            labels,
            labelled_tasks,
        })
    }
}

impl GeneratedData {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for ds in &self.train {
            manifest.push_str(&format!("train {}\n", ds.name));
            ds.save(&dir.join(&ds.name))?;
        }
        for ds in &self.in_domain_test {
            manifest.push_str(&format!("test {}\n", ds.name));
            ds.save(&dir.join(&ds.name))?;
        }
        manifest.push_str(&format!("ood {}\n", self.ood_test.name));
        self.ood_test.save(&dir.join(&self.ood_test.name))?;
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<GeneratedData> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        let mut train = Vec::new();
        let mut in_domain_test = Vec::new();
        let mut ood = None;
        for line in manifest.lines() {
            let (kind, name) = line
                .split_once(' ')
                .ok_or_else(|| Error::Config("manifest.txt: bad line".into()))?;
            let ds = SyntheticDataset::load(&dir.join(name), name)?;
            match kind {
                "train" => train.push(ds),
                "test" => in_domain_test.push(ds),
                "ood" => ood = Some(ds),
                other => return Err(Error::Config(format!("manifest.txt: unknown kind {other}"))),
            }
        }
        Ok(GeneratedData {
            train,
            in_domain_test,
            ood_test: ood.ok_or_else(|| Error::Config("manifest.txt: no ood dataset".into()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::band_energy;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = GeneratorSpec {
            n_train: 4,
            n_test: 2,
            n_ood: 3,
            ..Default::default()
        };
        let a = generate(&spec, 42).unwrap();
        let b = generate(&spec, 42).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.images.data(), y.images.data());
            assert_eq!(x.labels, y.labels);
        }
        assert_eq!(a.ood_test.images.data(), b.ood_test.images.data());
        let c = generate(&spec, 43).unwrap();
        assert_ne!(a.train[0].images.data(), c.train[0].images.data());
    }

    #[test]
    fn label_subset_contract() {
        let spec = GeneratorSpec {
            n_train: 8,
            n_test: 4,
            n_ood: 4,
            ..Default::default()
        };
        let g = generate(&spec, 7).unwrap();
        for (k, ds) in g.train.iter().enumerate() {
            for b in 0..ds.labels.batch() {
                for t in 0..ds.labels.tasks() {
                    let v = ds.labels.get(b, t);
                    if spec.label_subsets[k].contains(&t) {
                        assert_ne!(v, UNKNOWN);
                    } else {
                        assert_eq!(v, UNKNOWN);
                    }
                }
            }
        }
        // held-out test set is fully labelled
        assert!(g.ood_test.labels.values().iter().all(|&v| v != UNKNOWN));
    }

    #[test]
    fn unlabelled_task_rejected() {
        let spec = GeneratorSpec {
            label_subsets: vec![vec![0, 1], vec![1, 2], vec![2, 0], vec![0, 1]],
            ..Default::default()
        };
        // task 3 never labelled
        assert!(generate(&spec, 1).is_err());
    }

    #[test]
    fn style_energy_below_cutoff() {
        let spec = GeneratorSpec::default();
        for k in 0..spec.domains {
            let d = spec.domain_spec(k);
            let img = render_sample(&spec, &d, &[], &[], derive_seed(9, &[k as u64]));
            let (low, high) = band_energy(&img, STYLE_CUTOFF);
            // the style is low-passed by construction; only the white pixel
            // noise contributes above the cutoff
            let total = low + high;
            assert!(
                low / total > 0.9,
                "domain {k}: low fraction {}",
                low / total
            );
        }
    }

    #[test]
    fn motif_energy_above_cutoff_and_distinguishable() {
        let spec = GeneratorSpec::default();
        let fields: Vec<Tensor> = (0..spec.tasks).map(|t| spec.motif(t).field(64)).collect();
        for (t, f) in fields.iter().enumerate() {
            let (low, high) = band_energy(f, STYLE_CUTOFF);
            assert!(
                high / (low + high) > 0.99,
                "motif {t} high fraction {}",
                high / (low + high)
            );
        }
        for a in 0..spec.tasks {
            for b in 0..a {
                let (fa, fb) = (fields[a].data(), fields[b].data());
                let dot: f64 = fa.iter().zip(fb).map(|(x, y)| x * y).sum();
                let na: f64 = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
                let corr = (dot / (na * nb)).abs();
                assert!(corr < 0.5, "motifs {a},{b}: correlation {corr}");
            }
        }
    }

    #[test]
    fn positive_twin_isolates_motif() {
        let spec = GeneratorSpec::default();
        let d = spec.domain_spec(1);
        let motifs: Vec<Tensor> = (0..spec.tasks).map(|t| spec.motif(t).field(64)).collect();
        let seed = derive_seed(11, &[5]);
        let with = render_sample(&spec, &d, &motifs, &[true, false, true, false], seed);
        let without = render_sample(&spec, &d, &motifs, &[true, false, false, false], seed);
        let diff: Vec<f64> = with
            .data()
            .iter()
            .zip(without.data())
            .map(|(a, b)| a - b)
            .collect();
        let diff = Tensor::new(vec![1, 64, 64], diff).unwrap();
        let (low, high) = band_energy(&diff, STYLE_CUTOFF);
        assert!(high / (low + high) > 0.8, "ratio {}", high / (low + high));
    }

    #[test]
    fn ood_style_extrapolates_training_range() {
        let spec = GeneratorSpec::default();
        let offsets: Vec<f64> = (0..spec.domains)
            .map(|k| spec.domain_spec(k).mean_offset)
            .collect();
        let max = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = offsets.iter().cloned().fold(f64::INFINITY, f64::min);
        let ood = spec.ood_spec();
        assert!(ood.mean_offset > max || ood.mean_offset < min);
        let max_gain = (0..spec.domains)
            .map(|k| spec.domain_spec(k).noise_gain)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(ood.noise_gain > max_gain);
    }
}
