use std::path::{Path, PathBuf};

use headsparse::calibration::CalibrationConfig;
use headsparse::distill::{Stage2Config, ToyConfig};
use headsparse::engine::{DecodeConfig, SelectorMode};
use headsparse::indexer::Stage1Config;
use headsparse::seed::SeedTree;
use headsparse::workload::{
    ModelGeometry, NeedleSpan, Probe, ProbeKind, SignalParams, TopicSpec, WorkloadSpec,
};
use headsparse::Error;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "HEADSPARSE_OUT";
pub const DEFAULT_OUT: &str = "headsparse-out";

/// Complete experiment configuration. Every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub geometry: ModelGeometry,
    pub workload: WorkloadSection,
    pub calibration: CalibrationConfig,
    pub stage1: Stage1Config,
    pub indexer: IndexerSection,
    pub decode: DecodeSection,
    pub run: RunSection,
    pub distill: DistillSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut geometry = ModelGeometry::new(2, 8, 2, 64);
        geometry.rope_base = 1e6;
        geometry.window = 256;
        RunConfig {
            seed: 0,
            output_dir: None,
            geometry,
            workload: WorkloadSection::default(),
            calibration: CalibrationConfig::default(),
            stage1: Stage1Config::default(),
            indexer: IndexerSection::default(),
            decode: DecodeSection::default(),
            run: RunSection::default(),
            distill: DistillSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub seq_len: usize,
    /// Planted retrieval heads; defaults to the count implied by the ratio.
    pub planted_heads: Option<usize>,
    pub needles: Vec<NeedleSpan>,
    pub probes: Vec<Probe>,
    pub topic: Option<TopicSpec>,
    pub signal: SignalParams,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            seq_len: 4096,
            planted_heads: None,
            needles: vec![NeedleSpan {
                src: 512,
                dst: 3900,
                len: 32,
            }],
            probes: vec![
                Probe {
                    position: 3910,
                    kind: ProbeKind::Concentrated,
                },
                Probe {
                    position: 4000,
                    kind: ProbeKind::Diffuse,
                },
            ],
            topic: Some(TopicSpec::default()),
            signal: SignalParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorSource {
    /// Projectors written by `train-indexer`.
    Trained,
    /// Coordinate selector over the content dimensions; needs no training.
    Content,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexerSection {
    pub source: ProjectorSource,
    pub rows_per_head: usize,
    /// Earliest training query position; defaults to half the sequence.
    pub min_position: Option<usize>,
    /// Held-out rows for the recall figure printed after training.
    pub eval_rows: usize,
    pub recall_k: usize,
}

impl Default for IndexerSection {
    fn default() -> Self {
        IndexerSection {
            source: ProjectorSource::Trained,
            rows_per_head: 256,
            min_position: None,
            eval_rows: 64,
            recall_k: 64,
        }
    }
}

/// Selector settings; `p` and the block size come from the geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub mode: SelectorMode,
    pub k: usize,
    pub n_splits: usize,
    pub record_true_mass: bool,
    pub trace_every: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        DecodeSection {
            mode: d.mode,
            k: d.k,
            n_splits: d.n_splits,
            record_true_mass: d.record_true_mass,
            trace_every: d.trace_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Prefill length; defaults to the sequence length minus 256.
    pub prompt_len: Option<usize>,
    pub sweep_ks: Vec<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            prompt_len: None,
            sweep_ks: vec![16, 64, 256, 1024],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub toy: ToyConfig,
    pub stage2: Stage2Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub iterations: usize,
    pub warmup: usize,
    /// Decode positions timed per iteration, taken from the end of the cache.
    pub positions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            lengths: vec![8192, 32768],
            iterations: 10,
            warmup: 2,
            positions: 8,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config encode: {e}")))
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.geometry.validate()?;
        self.stage1.validate()?;
        self.decode_config().validate()?;
        let prompt = self.prompt_len();
        if prompt == 0 || prompt >= self.workload.seq_len {
            return Err(Error::Argument(format!(
                "prompt_len {prompt} must lie in 1..{}",
                self.workload.seq_len
            )));
        }
        if self.indexer.rows_per_head == 0 || self.indexer.recall_k == 0 {
            return Err(Error::Argument("rows_per_head and recall_k must be positive".into()));
        }
        if self.min_training_position() >= self.workload.seq_len {
            return Err(Error::Argument("indexer.min_position must be below seq_len".into()));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.run
            .prompt_len
            .unwrap_or_else(|| self.workload.seq_len.saturating_sub(256).max(1))
    }

    pub fn min_training_position(&self) -> usize {
        self.indexer.min_position.unwrap_or(self.workload.seq_len / 2)
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            mode: self.decode.mode,
            p: self.geometry.top_p,
            k: self.decode.k,
            block_size: self.geometry.block_size,
            n_splits: self.decode.n_splits,
            record_true_mass: self.decode.record_true_mass,
            trace_every: self.decode.trace_every,
        }
    }

    pub fn root_seed(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    pub fn workload_seed(&self) -> u64 {
        self.root_seed().child("workload").seed()
    }

    /// Workload spec with planted heads drawn from the root seed.
    pub fn workload_spec(&self) -> WorkloadSpec {
        let w = &self.workload;
        let planted = w
            .planted_heads
            .unwrap_or_else(|| WorkloadSpec::planted_count(&self.geometry));
        let mut spec = WorkloadSpec::new(w.seq_len).with_random_retrieval_heads(
            &self.geometry,
            planted,
            self.root_seed().child("planted").seed(),
        );
        spec.needles = w.needles.clone();
        spec.probes = w.probes.clone();
        spec.topic = w.topic.clone();
        spec.signal = w.signal.clone();
        spec
    }
}
