//! Synthetic changing-prior benchmark.
//!
//! Each question type owns a disjoint answer set. The train split puts
//! `head_mass` of the prior on a per-type head answer and leaks the answer
//! into the context with probability `shortcut_rate`; `test_ood` reverses
//! the per-type prior and always plants a wrong-answer cue, so both the
//! prior and the shortcut actively mislead. The evidence carries the true
//! answer in exactly one region, which is also the ground-truth grounding
//! mask — evidence is bias-free by construction.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetMeta, Instance, Split};
use crate::nn::{rng, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_types")]
    pub types: usize,
    /// Evidence regions per instance.
    #[serde(default = "default_regions")]
    pub regions: usize,
    #[serde(default = "default_d_v")]
    pub d_v: usize,
    #[serde(default = "default_d_q")]
    pub d_q: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Train prior mass on the per-type head answer.
    #[serde(default = "default_head_mass")]
    pub head_mass: f64,
    /// Probability the train context contains the answer cue.
    #[serde(default = "default_shortcut_rate")]
    pub shortcut_rate: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub soft_labels: bool,
}

fn default_classes() -> usize {
    20
}
fn default_types() -> usize {
    4
}
fn default_regions() -> usize {
    8
}
fn default_d_v() -> usize {
    16
}
fn default_d_q() -> usize {
    16
}
fn default_n_train() -> usize {
    24000
}
fn default_n_test() -> usize {
    2000
}
fn default_head_mass() -> f64 {
    0.85
}
fn default_shortcut_rate() -> f64 {
    0.9
}
fn default_noise_sigma() -> f64 {
    0.2
}
fn default_seed() -> u64 {
    1
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 20,
            types: 4,
            regions: 8,
            d_v: 16,
            d_q: 16,
            n_train: 24000,
            n_test: 2000,
            head_mass: 0.85,
            shortcut_rate: 0.9,
            noise_sigma: 0.2,
            seed: 1,
            soft_labels: false,
        }
    }
}

impl GeneratorConfig {
    /// Answers per type.
    pub fn answers_per_type(&self) -> usize {
        self.classes / self.types.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.types == 0 || self.classes == 0 {
            violations.push("classes and types must be >= 1".to_string());
        } else if self.classes % self.types != 0 {
            violations.push(format!(
                "classes ({}) must be divisible by types ({})",
                self.classes, self.types
            ));
        }
        for (name, v) in [
            ("regions", self.regions),
            ("d_v", self.d_v),
            ("d_q", self.d_q),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
        ] {
            if v == 0 {
                violations.push(format!("{name} must be >= 1"));
            }
        }
        if self.types > 0 && self.classes % self.types == 0 {
            let k = self.answers_per_type();
            let lo = 1.0 / k as f64;
            if !(self.head_mass >= lo && self.head_mass < 1.0) {
                violations.push(format!(
                    "head_mass {} must lie in [1/{k}, 1)",
                    self.head_mass
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.shortcut_rate) {
            violations.push(format!("shortcut_rate {} must lie in [0,1]", self.shortcut_rate));
        }
        if !(self.noise_sigma > 0.0) {
            violations.push(format!("noise_sigma {} must be > 0", self.noise_sigma));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let hex: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }

    fn meta(&self, split: Split) -> DatasetMeta {
        DatasetMeta {
            n_v: self.regions,
            d_v: self.d_v,
            d_q: self.d_q,
            classes: self.classes,
            types: self.types,
            split,
            config_digest: self.digest(),
        }
    }
}

/// Fixed unit-norm cue vectors, drawn once per seed.
pub struct Prototypes {
    /// Per-answer evidence prototype, `d_v` each.
    pub evidence: Vec<Vec<f64>>,
    /// Per-answer context cue, `d_q` each.
    pub cue: Vec<Vec<f64>>,
    /// Per-type context embedding, `d_q` each.
    pub type_emb: Vec<Vec<f64>>,
}

fn unit_normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

pub fn prototypes(config: &GeneratorConfig) -> Prototypes {
    let mut stream = rng::derive(config.seed, "benchmark/prototypes");
    let evidence = (0..config.classes)
        .map(|_| unit_normal_vec(&mut stream, config.d_v))
        .collect();
    let cue = (0..config.classes)
        .map(|_| unit_normal_vec(&mut stream, config.d_q))
        .collect();
    let type_emb = (0..config.types)
        .map(|_| unit_normal_vec(&mut stream, config.d_q))
        .collect();
    Prototypes { evidence, cue, type_emb }
}

/// Per-type answer prior over within-type positions. Position 0 is the head
/// answer; `reversed` hands the head mass to the tail instead.
fn type_prior(config: &GeneratorConfig, reversed: bool) -> Vec<f64> {
    let k = config.answers_per_type();
    if k == 1 {
        return vec![1.0];
    }
    let rest = (1.0 - config.head_mass) / (k - 1) as f64;
    let mut prior = vec![rest; k];
    prior[0] = config.head_mass;
    if reversed {
        prior.reverse();
    }
    prior
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let mut r: f64 = rng.gen();
    for (i, &p) in probs.iter().enumerate() {
        r -= p;
        if r < 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

pub struct SplitSet {
    pub train: Dataset,
    pub test_ood: Dataset,
    pub test_id: Dataset,
}

/// Generate all three splits deterministically from the config seed.
pub fn generate(config: &GeneratorConfig) -> Result<SplitSet> {
    config.validate()?;
    let protos = prototypes(config);
    Ok(SplitSet {
        train: generate_split(config, &protos, Split::Train, config.n_train),
        test_ood: generate_split(config, &protos, Split::TestOod, config.n_test),
        test_id: generate_split(config, &protos, Split::TestId, config.n_test),
    })
}

fn generate_split(
    config: &GeneratorConfig,
    protos: &Prototypes,
    split: Split,
    count: usize,
) -> Dataset {
    let mut stream = rng::derive(config.seed, &format!("benchmark/{}", split.as_str()));
    let normal = Normal::new(0.0, config.noise_sigma).unwrap();
    let k = config.answers_per_type();
    let prior = type_prior(config, split == Split::TestOod);

    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let type_id = stream.gen_range(0..config.types);
        let pos = sample_categorical(&mut stream, &prior);
        let answer = type_id * k + pos;

        // evidence: one signal region, distractor prototypes elsewhere
        let signal_region = stream.gen_range(0..config.regions);
        let mut evidence = Vec::with_capacity(config.regions * config.d_v);
        for region in 0..config.regions {
            let proto = if region == signal_region {
                &protos.evidence[answer]
            } else if config.types > 1 {
                // distractors come from other types, so the signal region is
                // the unique same-type prototype: the evidence identifies
                // the answer without any help from the context cue
                let mut other = stream.gen_range(0..config.classes - k);
                if other >= type_id * k {
                    other += k;
                }
                &protos.evidence[other]
            } else {
                let mut other = stream.gen_range(0..config.classes - 1);
                if other >= answer {
                    other += 1;
                }
                &protos.evidence[other]
            };
            evidence.extend(proto.iter().map(|&v| v + normal.sample(&mut stream)));
        }
        let mut mask = vec![0.0; config.regions];
        mask[signal_region] = 1.0;

        // context: type embedding + answer cue (possibly misleading) + noise
        let cue_answer = match split {
            Split::Train | Split::TestId => {
                if k > 1 && stream.gen::<f64>() >= config.shortcut_rate {
                    let mut wrong = stream.gen_range(0..k - 1);
                    if wrong >= pos {
                        wrong += 1;
                    }
                    type_id * k + wrong
                } else {
                    answer
                }
            }
            Split::TestOod => {
                if k > 1 {
                    let mut wrong = stream.gen_range(0..k - 1);
                    if wrong >= pos {
                        wrong += 1;
                    }
                    type_id * k + wrong
                } else {
                    answer
                }
            }
        };
        let context: Vec<f64> = protos.type_emb[type_id]
            .iter()
            .zip(&protos.cue[cue_answer])
            .map(|(t, c)| t + c + normal.sample(&mut stream))
            .collect();

        let mut label = vec![0.0; config.classes];
        if config.soft_labels && k >= 3 {
            label[answer] = 0.9;
            label[type_id * k + (pos + 1) % k] = 0.6;
            label[type_id * k + (pos + 2) % k] = 0.3;
        } else {
            label[answer] = 1.0;
        }

        instances.push(Instance {
            evidence: Matrix::from_vec(config.regions, config.d_v, evidence)
                .expect("generator shapes are consistent"),
            context,
            type_id,
            label,
            grounding_mask: mask,
        });
    }

    Dataset { instances, meta: config.meta(split) }
}

/// Empirical per-type answer distribution: accumulate soft labels per type
/// and normalize each row. Shares the accumulation rule with
/// `ensemble::fit_distribution_bias`.
pub fn summarize_priors(data: &Dataset) -> Result<Matrix> {
    if data.is_empty() {
        return Err(Error::Empty("cannot summarize priors of an empty dataset".into()));
    }
    let (types, classes) = (data.meta.types, data.meta.classes);
    let mut table = Matrix::zeros(types, classes);
    for inst in &data.instances {
        for (c, &score) in inst.label.iter().enumerate() {
            let cur = table.get(inst.type_id, c);
            table.set(inst.type_id, c, cur + score);
        }
    }
    for t in 0..types {
        let sum: f64 = table.row(t).iter().sum();
        if sum > 0.0 {
            for c in 0..classes {
                table.set(t, c, table.get(t, c) / sum);
            }
        }
    }
    Ok(table)
}

/// `S' = 1 - S` on every grounding score; everything else unchanged.
pub fn invert_grounding(data: &Dataset) -> Dataset {
    let mut out = data.clone();
    for inst in &mut out.instances {
        for s in &mut inst.grounding_mask {
            *s = 1.0 - *s;
        }
    }
    out
}

const HEADER_TAG: &str = "#gge-dataset v1 ";

/// Line-oriented dataset file: a header with shape metadata and the config
/// digest, then one record per instance.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let meta = serde_json::to_string(&data.meta)
        .map_err(|e| Error::Parse { line: 0, detail: e.to_string() })?;
    writeln!(file, "{HEADER_TAG}{meta}")?;
    for inst in &data.instances {
        let label: Vec<String> = inst
            .label
            .iter()
            .enumerate()
            .filter(|(_, &s)| s != 0.0)
            .map(|(i, s)| format!("{i}:{s}"))
            .collect();
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        writeln!(
            file,
            "{}|{}|{}|{}|{}",
            inst.type_id,
            label.join(","),
            join(inst.evidence.data()),
            join(&inst.context),
            join(&inst.grounding_mask),
        )?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, detail: "empty dataset file".into() })?;
    let header = header?;
    let meta_json = header
        .strip_prefix(HEADER_TAG)
        .ok_or_else(|| Error::Parse { line: 1, detail: "missing dataset header".into() })?;
    let meta: DatasetMeta = serde_json::from_str(meta_json)
        .map_err(|e| Error::Parse { line: 1, detail: e.to_string() })?;

    let mut instances = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse { line: lineno, detail };
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", fields.len())));
        }
        let type_id: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(format!("type_id: {e}")))?;
        let mut label = vec![0.0; meta.classes];
        if !fields[1].is_empty() {
            for pair in fields[1].split(',') {
                let (i, s) = pair
                    .split_once(':')
                    .ok_or_else(|| parse_err(format!("malformed label pair `{pair}`")))?;
                let i: usize = i.parse().map_err(|e| parse_err(format!("label index: {e}")))?;
                if i >= meta.classes {
                    return Err(parse_err(format!("label index {i} out of range")));
                }
                label[i] = s.parse().map_err(|e| parse_err(format!("label score: {e}")))?;
            }
        }
        let floats = |s: &str, what: &str, expected: usize| -> Result<Vec<f64>> {
            let v: std::result::Result<Vec<f64>, _> =
                s.split_whitespace().map(str::parse).collect();
            let v = v.map_err(|e| parse_err(format!("{what}: {e}")))?;
            if v.len() != expected {
                return Err(parse_err(format!(
                    "{what}: expected {expected} values, got {}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let evidence = floats(fields[2], "evidence", meta.n_v * meta.d_v)?;
        let context = floats(fields[3], "context", meta.d_q)?;
        let mask = floats(fields[4], "mask", meta.n_v)?;
        if type_id >= meta.types {
            return Err(parse_err(format!("type_id {type_id} out of range")));
        }
        instances.push(Instance {
            evidence: Matrix::from_vec(meta.n_v, meta.d_v, evidence)?,
            context,
            type_id,
            label,
            grounding_mask: mask,
        });
    }
    Ok(Dataset { instances, meta })
}
