//! Synthetic multi-domain benchmarks, super-domain clustering and episode
//! sampling.
//!
//! Every domain applies its own rotation and translation to a shared set of
//! class prototypes. Domains are drawn around a handful of latent "families"
//! so that some source domains are genuinely close to each target domain.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub type DomainId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Source,
    TargetVal,
    TargetTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classification { num_classes: usize },
    Regression,
}

impl Task {
    /// Width of the prediction head.
    pub fn output_dim(&self) -> usize {
        match self {
            Task::Classification { num_classes } => *num_classes,
            Task::Regression => 1,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Task::Classification { num_classes } => Some(*num_classes),
            Task::Regression => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Classes(Vec<u32>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
            Labels::Values(v) => Labels::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Concatenates label vectors of the same kind.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Labels>) -> Option<Labels> {
        let mut out: Option<Labels> = None;
        for p in parts {
            match (&mut out, p) {
                (None, l) => out = Some(l.clone()),
                (Some(Labels::Classes(a)), Labels::Classes(b)) => a.extend_from_slice(b),
                (Some(Labels::Values(a)), Labels::Values(b)) => a.extend_from_slice(b),
                _ => return None,
            }
        }
        out
    }
}

/// One domain's samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_id: DomainId,
    pub split: Split,
    #[serde(skip)]
    pub inputs: Mat,
    #[serde(skip, default = "empty_labels")]
    pub labels: Labels,
    #[serde(skip)]
    pub group_tags: Option<Vec<u32>>,
    /// Free-form integer metadata (e.g. `family`, `region`) used by
    /// metadata-keyed clustering.
    pub metadata: BTreeMap<String, u32>,
}

fn empty_labels() -> Labels {
    Labels::Classes(Vec::new())
}

impl DomainDataset {
    pub fn num_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn select_inputs(&self, idx: &[usize]) -> Mat {
        select_rows(&self.inputs, idx)
    }

    fn validate(&self, task: &Task) -> Result<()> {
        if self.num_samples() == 0 {
            return Err(Error::Empty("domain without samples"));
        }
        if self.labels.len() != self.num_samples() {
            return Err(Error::InvalidArgument(format!(
                "domain {} has {} inputs but {} labels",
                self.domain_id,
                self.num_samples(),
                self.labels.len()
            )));
        }
        if let Some(tags) = &self.group_tags {
            if tags.len() != self.num_samples() {
                return Err(Error::InvalidArgument(format!(
                    "domain {} group tag count mismatch",
                    self.domain_id
                )));
            }
        }
        match (task, &self.labels) {
            (Task::Classification { num_classes }, Labels::Classes(ys)) => {
                if let Some(bad) = ys.iter().find(|&&y| y as usize >= *num_classes) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range in domain {}",
                        self.domain_id
                    )));
                }
            }
            (Task::Regression, Labels::Values(_)) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "label kind does not match task in domain {}",
                    self.domain_id
                )))
            }
        }
        Ok(())
    }
}

pub fn select_rows(m: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros((idx.len(), m.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKindSpec {
    #[default]
    Classification,
    Regression,
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub task: TaskKindSpec,
    pub num_source_domains: usize,
    pub num_val_domains: usize,
    pub num_target_domains: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_domain_range: (usize, usize),
    pub shift_strength: f64,
    pub seed: u64,
    /// Latent transform clusters that domains are drawn around. Source
    /// domains form contiguous blocks per family; targets draw a family at
    /// random.
    pub num_families: usize,
    /// Scale of the class prototypes relative to unit within-class noise.
    pub class_separation: f64,
    pub noise_std: f64,
    /// Family translation scale (multiplied by `shift_strength`).
    pub translation_scale: f64,
    /// Family rotation angle scale in radians (multiplied by `shift_strength`).
    pub rotation_scale: f64,
    /// Fraction of the family transform used as per-domain jitter.
    pub domain_jitter: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            task: TaskKindSpec::Classification,
            num_source_domains: 20,
            num_val_domains: 3,
            num_target_domains: 6,
            num_classes: 5,
            input_dim: 16,
            samples_per_domain_range: (100, 300),
            shift_strength: 1.0,
            seed: 0,
            num_families: 5,
            class_separation: 1.6,
            noise_std: 1.0,
            translation_scale: 3.0,
            rotation_scale: 0.6,
            domain_jitter: 0.6,
        }
    }
}

impl BenchmarkSpec {
    pub fn task(&self) -> Task {
        match self.task {
            TaskKindSpec::Classification => Task::Classification {
                num_classes: self.num_classes,
            },
            TaskKindSpec::Regression => Task::Regression,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_source_domains == 0 || self.num_target_domains == 0 {
            return bad("domain counts must be at least 1");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.task == TaskKindSpec::Classification && self.num_classes < 2 {
            return bad("classification benchmarks need num_classes >= 2");
        }
        let (lo, hi) = self.samples_per_domain_range;
        if lo == 0 || lo > hi {
            return bad("samples_per_domain_range must satisfy 1 <= lo <= hi");
        }
        if !(self.shift_strength >= 0.0) || !self.shift_strength.is_finite() {
            return bad("shift_strength must be finite and >= 0");
        }
        if self.num_families == 0 {
            return bad("num_families must be at least 1");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        Ok(())
    }
}

/// All domains of a benchmark plus the source/target partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainRegistry {
    pub spec: BenchmarkSpec,
    pub task: Task,
    pub input_dim: usize,
    pub domains: Vec<DomainDataset>,
}

impl DomainRegistry {
    pub fn new(
        spec: BenchmarkSpec,
        task: Task,
        input_dim: usize,
        domains: Vec<DomainDataset>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for d in &domains {
            if !seen.insert(d.domain_id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate domain id {}",
                    d.domain_id
                )));
            }
            if d.input_dim() != input_dim {
                return Err(Error::Shape {
                    context: "domain inputs",
                    expected: format!("{input_dim} columns"),
                    got: format!("{}", d.input_dim()),
                });
            }
            d.validate(&task)?;
        }
        Ok(DomainRegistry {
            spec,
            task,
            input_dim,
            domains,
        })
    }

    pub fn ids_with(&self, split: Split) -> Vec<DomainId> {
        self.domains
            .iter()
            .filter(|d| d.split == split)
            .map(|d| d.domain_id)
            .collect()
    }

    pub fn source_ids(&self) -> Vec<DomainId> {
        self.ids_with(Split::Source)
    }

    pub fn val_ids(&self) -> Vec<DomainId> {
        self.ids_with(Split::TargetVal)
    }

    pub fn test_ids(&self) -> Vec<DomainId> {
        self.ids_with(Split::TargetTest)
    }

    /// Validation and test domains together.
    pub fn target_ids(&self) -> Vec<DomainId> {
        self.domains
            .iter()
            .filter(|d| d.split != Split::Source)
            .map(|d| d.domain_id)
            .collect()
    }

    pub fn domain(&self, id: DomainId) -> Result<&DomainDataset> {
        self.domains
            .iter()
            .find(|d| d.domain_id == id)
            .ok_or(Error::UnknownDomain(id))
    }

    pub fn total_samples(&self, ids: &[DomainId]) -> Result<usize> {
        ids.iter()
            .map(|&i| self.domain(i).map(|d| d.num_samples()))
            .sum()
    }
}

/// Read access to labelled domains. Training code only sees data through this
/// trait, which is what lets the privacy experiment audit every read.
pub trait DomainSource {
    fn task(&self) -> Task;
    fn input_dim(&self) -> usize;
    fn fetch(&self, id: DomainId) -> Result<&DomainDataset>;
}

impl DomainSource for DomainRegistry {
    fn task(&self) -> Task {
        self.task
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn fetch(&self, id: DomainId) -> Result<&DomainDataset> {
        self.domain(id)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Product of `dim` random Givens rotations with angles `~ N(0, angle_scale²)`.
fn random_rotation(rng: &mut ChaCha8Rng, dim: usize, angle_scale: f64) -> Mat {
    let mut r = Mat::eye(dim);
    if dim < 2 {
        return r;
    }
    for _ in 0..dim {
        let i = rng.random_range(0..dim);
        let mut j = rng.random_range(0..dim - 1);
        if j >= i {
            j += 1;
        }
        let z: f64 = StandardNormal.sample(rng);
        let theta = z * angle_scale;
        let (sn, cs) = theta.sin_cos();
        let g = {
            let mut g = Mat::eye(dim);
            g[[i, i]] = cs;
            g[[j, j]] = cs;
            g[[i, j]] = -sn;
            g[[j, i]] = sn;
            g
        };
        r = g.dot(&r);
    }
    r
}

fn round_f32(m: &mut Mat) {
    m.mapv_inplace(|x| x as f32 as f64);
}

/// Deterministically generates a benchmark from `spec`.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<DomainRegistry> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.input_dim;
    let task = spec.task();
    let shift = spec.shift_strength;

    let num_protos = match task {
        Task::Classification { num_classes } => num_classes,
        Task::Regression => 1,
    };
    let mut protos = Mat::zeros((num_protos, dim));
    for mut row in protos.outer_iter_mut() {
        row.assign(&gaussian_vec(&mut rng, dim, spec.class_separation));
    }
    let response = gaussian_vec(&mut rng, dim, 1.0 / (dim as f64).sqrt());

    let families: Vec<(Mat, Array1<f64>)> = (0..spec.num_families)
        .map(|_| {
            let rot = random_rotation(&mut rng, dim, spec.rotation_scale * shift);
            let t = gaussian_vec(&mut rng, dim, spec.translation_scale * shift);
            (rot, t)
        })
        .collect();

    let splits = std::iter::repeat_n(Split::Source, spec.num_source_domains)
        .chain(std::iter::repeat_n(Split::TargetVal, spec.num_val_domains))
        .chain(std::iter::repeat_n(
            Split::TargetTest,
            spec.num_target_domains,
        ));

    let (lo, hi) = spec.samples_per_domain_range;
    let mut domains = Vec::new();
    for (idx, split) in splits.enumerate() {
        let domain_id = idx as DomainId;
        let family = if split == Split::Source {
            idx * spec.num_families / spec.num_source_domains
        } else {
            rng.random_range(0..spec.num_families)
        };
        let (frot, ft) = &families[family];
        let jitter_rot = random_rotation(
            &mut rng,
            dim,
            spec.rotation_scale * shift * spec.domain_jitter,
        );
        let rot = jitter_rot.dot(frot);
        let trans = ft
            + &gaussian_vec(
                &mut rng,
                dim,
                spec.translation_scale * shift * spec.domain_jitter,
            );
        let response_shift: f64 = {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * 0.5 * shift
        };

        let n = rng.random_range(lo..=hi);
        let mut canonical = Mat::zeros((n, dim));
        let labels = match task {
            Task::Classification { num_classes } => {
                let ys: Vec<u32> = (0..n)
                    .map(|_| rng.random_range(0..num_classes as u32))
                    .collect();
                for (r, &y) in ys.iter().enumerate() {
                    let noise = gaussian_vec(&mut rng, dim, spec.noise_std);
                    canonical
                        .row_mut(r)
                        .assign(&(&protos.row(y as usize) + &noise));
                }
                Labels::Classes(ys)
            }
            Task::Regression => {
                let mut ys = Vec::with_capacity(n);
                for r in 0..n {
                    let z = gaussian_vec(&mut rng, dim, spec.class_separation);
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let y = z.dot(&response) + response_shift + 0.1 * spec.noise_std * eps;
                    ys.push(y as f32 as f64);
                    canonical.row_mut(r).assign(&z);
                }
                Labels::Values(ys)
            }
        };
        let mut inputs = canonical.dot(&rot.t()) + &trans.view().insert_axis(ndarray::Axis(0));
        round_f32(&mut inputs);

        let mut metadata = BTreeMap::new();
        metadata.insert("family".to_string(), family as u32);
        domains.push(DomainDataset {
            domain_id,
            split,
            inputs,
            labels,
            group_tags: Some(vec![family as u32; n]),
            metadata,
        });
    }
    DomainRegistry::new(spec.clone(), task, dim, domains)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy", content = "key")]
pub enum ClusterStrategy {
    /// Sorted domain ids dealt to experts in turn.
    RoundRobin,
    /// Domains sharing a metadata value go to the same expert; distinct values
    /// are dealt round-robin.
    MetadataKey(String),
}

/// Assignment of source domains to experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperDomainMap {
    pub num_experts: usize,
    pub assignment: BTreeMap<DomainId, usize>,
}

impl SuperDomainMap {
    pub fn expert_of(&self, id: DomainId) -> Option<usize> {
        self.assignment.get(&id).copied()
    }

    pub fn members(&self, expert: usize) -> Vec<DomainId> {
        self.assignment
            .iter()
            .filter(|(_, &e)| e == expert)
            .map(|(&d, _)| d)
            .collect()
    }
}

/// Clusters the registry's source domains into `num_experts` super-domains.
pub fn cluster_domains(
    registry: &DomainRegistry,
    num_experts: usize,
    strategy: &ClusterStrategy,
) -> Result<SuperDomainMap> {
    cluster_ids(registry, &registry.source_ids(), num_experts, strategy)
}

/// Clusters an explicit id set (used for the private half of a privacy split).
pub fn cluster_ids(
    registry: &DomainRegistry,
    ids: &[DomainId],
    num_experts: usize,
    strategy: &ClusterStrategy,
) -> Result<SuperDomainMap> {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if num_experts == 0 || num_experts > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {num_experts} super-domains from {} domains",
            ids.len()
        )));
    }
    let mut assignment = BTreeMap::new();
    match strategy {
        ClusterStrategy::RoundRobin => {
            for (i, id) in ids.iter().enumerate() {
                assignment.insert(*id, i % num_experts);
            }
        }
        ClusterStrategy::MetadataKey(key) => {
            let mut by_value: BTreeMap<u32, Vec<DomainId>> = BTreeMap::new();
            for &id in &ids {
                let d = registry.domain(id)?;
                let v = *d.metadata.get(key).ok_or_else(|| {
                    Error::InvalidArgument(format!("domain {id} has no metadata key {key:?}"))
                })?;
                by_value.entry(v).or_default().push(id);
            }
            if by_value.len() < num_experts {
                return Err(Error::InvalidArgument(format!(
                    "metadata key {key:?} has {} distinct values, fewer than {num_experts} experts",
                    by_value.len()
                )));
            }
            for (i, members) in by_value.values().enumerate() {
                for &id in members {
                    assignment.insert(id, i % num_experts);
                }
            }
        }
    }
    Ok(SuperDomainMap {
        num_experts,
        assignment,
    })
}

/// Unlabelled support batch plus labelled query batch from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub domain_id: DomainId,
    pub support_x: Mat,
    pub query_x: Mat,
    pub query_y: Labels,
    pub support_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
}

/// Draws disjoint support and query sets without replacement.
pub fn sample_episode(
    domain: &DomainDataset,
    n_su: usize,
    n_q: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_su == 0 || n_q == 0 {
        return Err(Error::InvalidArgument(
            "support and query sizes must be >= 1".into(),
        ));
    }
    let need = n_su + n_q;
    if need > domain.num_samples() {
        return Err(Error::InsufficientSamples {
            domain_id: domain.domain_id,
            available: domain.num_samples(),
            requested: need,
        });
    }
    let picked = sample(rng, domain.num_samples(), need).into_vec();
    let (support_idx, query_idx) = (picked[..n_su].to_vec(), picked[n_su..].to_vec());
    Ok(Episode {
        domain_id: domain.domain_id,
        support_x: domain.select_inputs(&support_idx),
        query_x: domain.select_inputs(&query_idx),
        query_y: domain.labels.select(&query_idx),
        support_idx,
        query_idx,
    })
}

// ---------------------------------------------------------------------------
// On-disk format: registry.json plus little-endian binary arrays per domain.

const REGISTRY_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    format_version: u32,
    seed: u64,
    spec: BenchmarkSpec,
    task: Task,
    input_dim: usize,
    source_ids: Vec<DomainId>,
    val_ids: Vec<DomainId>,
    test_ids: Vec<DomainId>,
    domains: Vec<DomainEntry>,
}

#[derive(Serialize, Deserialize)]
struct DomainEntry {
    domain_id: DomainId,
    split: Split,
    num_samples: usize,
    metadata: BTreeMap<String, u32>,
    inputs_file: String,
    labels_file: String,
    labels_dtype: String,
    groups_file: Option<String>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn i32_bytes(values: impl Iterator<Item = u32>) -> Vec<u8> {
    values.flat_map(|v| (v as i32).to_le_bytes()).collect()
}

fn parse_f32(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "length not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn parse_i32(path: &Path, bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "length not a multiple of 4"));
    }
    bytes
        .chunks_exact(4)
        .map(|c| {
            let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            u32::try_from(v).map_err(|_| Error::format(path, format!("negative label {v}")))
        })
        .collect()
}

/// Writes `registry.json` and the per-domain arrays into `dir`.
pub fn write_registry(registry: &DomainRegistry, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for d in &registry.domains {
        let stem = format!("domain_{:04}", d.domain_id);
        let inputs_file = format!("{stem}_x.f32");
        write_bytes(
            &dir.join(&inputs_file),
            &f32_bytes(d.inputs.iter().copied()),
        )?;
        let (labels_file, labels_dtype, bytes) = match &d.labels {
            Labels::Classes(ys) => (
                format!("{stem}_y.i32"),
                "i32",
                i32_bytes(ys.iter().copied()),
            ),
            Labels::Values(ys) => (
                format!("{stem}_y.f32"),
                "f32",
                f32_bytes(ys.iter().copied()),
            ),
        };
        write_bytes(&dir.join(&labels_file), &bytes)?;
        let groups_file = match &d.group_tags {
            Some(tags) => {
                let f = format!("{stem}_g.i32");
                write_bytes(&dir.join(&f), &i32_bytes(tags.iter().copied()))?;
                Some(f)
            }
            None => None,
        };
        entries.push(DomainEntry {
            domain_id: d.domain_id,
            split: d.split,
            num_samples: d.num_samples(),
            metadata: d.metadata.clone(),
            inputs_file,
            labels_file,
            labels_dtype: labels_dtype.to_string(),
            groups_file,
        });
    }
    let file = RegistryFile {
        format_version: REGISTRY_FORMAT,
        seed: registry.spec.seed,
        spec: registry.spec.clone(),
        task: registry.task,
        input_dim: registry.input_dim,
        source_ids: registry.source_ids(),
        val_ids: registry.val_ids(),
        test_ids: registry.test_ids(),
        domains: entries,
    };
    let path = dir.join("registry.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::format(&path, e))?;
    write_bytes(&path, text.as_bytes())
}

/// Loads a registry written by [`write_registry`].
pub fn read_registry(dir: &Path) -> Result<DomainRegistry> {
    let path = dir.join("registry.json");
    let text = read_bytes(&path)?;
    let file: RegistryFile = serde_json::from_slice(&text).map_err(|e| Error::format(&path, e))?;
    if file.format_version != REGISTRY_FORMAT {
        return Err(Error::format(
            &path,
            format!("unsupported format_version {}", file.format_version),
        ));
    }
    let mut domains = Vec::new();
    for e in file.domains {
        let xp = dir.join(&e.inputs_file);
        let xs = parse_f32(&xp, &read_bytes(&xp)?)?;
        if xs.len() != e.num_samples * file.input_dim {
            return Err(Error::format(
                &xp,
                "input array size does not match num_samples × input_dim",
            ));
        }
        let inputs = Array2::from_shape_vec((e.num_samples, file.input_dim), xs)
            .map_err(|err| Error::format(&xp, err))?;
        let yp = dir.join(&e.labels_file);
        let ybytes = read_bytes(&yp)?;
        let labels = match e.labels_dtype.as_str() {
            "i32" => Labels::Classes(parse_i32(&yp, &ybytes)?),
            "f32" => Labels::Values(parse_f32(&yp, &ybytes)?),
            other => return Err(Error::format(&yp, format!("unknown label dtype {other}"))),
        };
        let group_tags = match &e.groups_file {
            Some(f) => {
                let gp = dir.join(f);
                Some(parse_i32(&gp, &read_bytes(&gp)?)?)
            }
            None => None,
        };
        domains.push(DomainDataset {
            domain_id: e.domain_id,
            split: e.split,
            inputs,
            labels,
            group_tags,
            metadata: e.metadata,
        });
    }
    let reg = DomainRegistry::new(file.spec, file.task, file.input_dim, domains)?;
    if reg.source_ids() != file.source_ids
        || reg.val_ids() != file.val_ids
        || reg.test_ids() != file.test_ids
    {
        return Err(Error::format(
            &path,
            "split id lists disagree with per-domain splits",
        ));
    }
    Ok(reg)
}

/// Subsamples `m` rows deterministically (used by the fixed-budget expert data mode).
pub fn subsample_rows(m: &Mat, labels: &Labels, keep: usize, rng: &mut impl Rng) -> (Mat, Labels) {
    if keep >= m.nrows() {
        return (m.clone(), labels.clone());
    }
    let mut idx = sample(rng, m.nrows(), keep).into_vec();
    idx.sort_unstable();
    (select_rows(m, &idx), labels.select(&idx))
}

/// Stacks the inputs and labels of several domains.
pub fn pool_domains(domains: &[&DomainDataset]) -> Result<(Mat, Labels)> {
    let first = domains.first().ok_or(Error::Empty("no domains to pool"))?;
    let total: usize = domains.iter().map(|d| d.num_samples()).sum();
    let mut x = Mat::zeros((total, first.input_dim()));
    let mut r = 0;
    for d in domains {
        x.slice_mut(s![r..r + d.num_samples(), ..])
            .assign(&d.inputs);
        r += d.num_samples();
    }
    let y = Labels::concat(domains.iter().map(|d| &d.labels))
        .ok_or_else(|| Error::InvalidArgument("mixed label kinds".into()))?;
    Ok((x, y))
}
