use std::fs;
use std::path::{Path, PathBuf};

use avfuse_core::data::SyntheticConfig;
use avfuse_core::downstream::finetune::{ExclusionStrategy, FinetuneConfig, HeadConfig, Task};
use avfuse_core::downstream::probe::ProbeConfig;
use avfuse_core::encoders::Modality;
use avfuse_core::model::ModelConfig;
use avfuse_core::schedule::ScheduleConfig;
use avfuse_core::trainer::PretrainConfig;
use avfuse_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// One file describes a whole run: corpus synthesis, the shared model, and
/// every stage's knobs. The global `seed` and `model` are stamped into each
/// stage config, so a run is reproducible from this file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Artifacts (resolved config, corpus, checkpoints, metrics, reports)
    /// land under here.
    pub out_dir: PathBuf,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub accumulation: usize,
    pub batch_frames: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub val_fraction: f64,
    pub val_every: u64,
    pub checkpoint_every: u64,
    pub exclude: Option<Modality>,
    pub schedule: ScheduleConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            accumulation: d.accumulation,
            batch_frames: d.batch_frames,
            min_frames: d.min_frames,
            max_frames: d.max_frames,
            val_fraction: d.val_fraction,
            val_every: d.val_every,
            checkpoint_every: d.checkpoint_every,
            exclude: d.exclude,
            schedule: d.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub task: Task,
    pub exclusion: ExclusionStrategy,
    pub vsr_step_ratio: f64,
    pub batch_frames: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub val_fraction: f64,
    pub val_every: u64,
    pub augment_spans: bool,
    pub mixup_alpha: f64,
    pub temporal_mask_len: usize,
    pub head: HeadConfig,
    pub schedule: ScheduleConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        FinetuneSection {
            task: d.task,
            exclusion: d.exclusion,
            vsr_step_ratio: d.vsr_step_ratio,
            batch_frames: d.batch_frames,
            min_frames: d.min_frames,
            max_frames: d.max_frames,
            val_fraction: d.val_fraction,
            val_every: d.val_every,
            augment_spans: d.augment_spans,
            mixup_alpha: d.mixup_alpha,
            temporal_mask_len: d.temporal_mask_len,
            head: d.head,
            schedule: d.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub epochs: usize,
    pub lr: f64,
    pub held_out_fraction: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        ProbeSection {
            epochs: d.epochs,
            lr: d.lr,
            held_out_fraction: d.held_out_fraction,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk scale: trains in minutes on one machine, large enough for the
    /// representations to be measurably useful.
    pub fn desk() -> Self {
        let mut cfg = RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            data: SyntheticConfig::default(),
            model: ModelConfig::desk(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            probe: ProbeSection::default(),
        };
        cfg.data.samples_per_frame = cfg.model.audio.total_stride();
        cfg
    }

    /// Smallest end-to-end shape: seconds per command, for smoke tests and
    /// gradient checks.
    pub fn tiny() -> Self {
        let mut cfg = RunConfig::desk();
        cfg.out_dir = PathBuf::from("runs/tiny");
        cfg.model = ModelConfig::tiny();
        cfg.data = SyntheticConfig {
            n_states: 3,
            dwell_mean: 2.0,
            sigma_audio: 0.2,
            sigma_visual: 0.2,
            n_utterances: 16,
            frame_min: 6,
            frame_max: 12,
            visual_height: 4,
            visual_width: 4,
            samples_per_frame: cfg.model.audio.total_stride(),
            state_symbols: "abc".to_string(),
        };
        cfg.pretrain = PretrainSection {
            accumulation: 1,
            batch_frames: 24,
            min_frames: 4,
            max_frames: 10,
            val_fraction: 0.25,
            val_every: 4,
            checkpoint_every: 4,
            exclude: None,
            schedule: ScheduleConfig::constant(1e-3, 8),
        };
        cfg.finetune = FinetuneSection {
            batch_frames: 24,
            min_frames: 4,
            max_frames: 10,
            val_every: 3,
            temporal_mask_len: 3,
            schedule: ScheduleConfig::constant(1e-3, 6),
            ..FinetuneSection::default()
        };
        cfg.probe.epochs = 60;
        cfg
    }

    /// Full scale as published; written out for reference, not for running
    /// on a desk.
    pub fn full_scale() -> Self {
        let mut cfg = RunConfig::desk();
        cfg.out_dir = PathBuf::from("runs/full");
        cfg.model = ModelConfig::full_scale();
        cfg.data.samples_per_frame = cfg.model.audio.total_stride();
        cfg.data.frame_min = 100;
        cfg.data.frame_max = 250;
        cfg.pretrain.batch_frames = 2400;
        cfg.pretrain.accumulation = 8;
        cfg.pretrain.max_frames = 250;
        cfg.pretrain.schedule = ScheduleConfig {
            total_steps: 150_000,
            ..ScheduleConfig::default()
        };
        cfg.finetune.batch_frames = 2400;
        cfg.finetune.max_frames = 250;
        cfg
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            model: self.model.clone(),
            schedule: p.schedule.clone(),
            accumulation: p.accumulation,
            batch_frames: p.batch_frames,
            min_frames: p.min_frames,
            max_frames: p.max_frames,
            val_fraction: p.val_fraction,
            val_every: p.val_every,
            checkpoint_every: p.checkpoint_every,
            exclude: p.exclude,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            model: self.model.clone(),
            task: f.task,
            head: f.head.clone(),
            exclusion: f.exclusion,
            schedule: f.schedule.clone(),
            vsr_step_ratio: f.vsr_step_ratio,
            batch_frames: f.batch_frames,
            min_frames: f.min_frames,
            max_frames: f.max_frames,
            val_fraction: f.val_fraction,
            val_every: f.val_every,
            augment_spans: f.augment_spans,
            mixup_alpha: f.mixup_alpha,
            temporal_mask_len: f.temporal_mask_len,
            seed: self.seed,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe.epochs,
            lr: self.probe.lr,
            held_out_fraction: self.probe.held_out_fraction,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir must not be empty"));
        }
        self.data.validate()?;
        let stride = self.model.audio.total_stride();
        if self.data.samples_per_frame != stride {
            return Err(Error::config(format!(
                "data.samples_per_frame {} does not match the audio encoder's total stride {stride}",
                self.data.samples_per_frame
            )));
        }
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        self.probe_config().validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }

    /// Writes the fully resolved config (defaults filled in, overrides
    /// applied) next to the run's other artifacts.
    pub fn echo_resolved(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join("config.resolved.toml");
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use avfuse_core::objective::LossDirections;

    #[test]
    fn presets_validate() {
        RunConfig::tiny().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        RunConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_identity() {
        for cfg in [RunConfig::tiny(), RunConfig::desk(), RunConfig::full_scale()] {
            let text = cfg.to_toml().unwrap();
            let back: RunConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn empty_file_means_all_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::desk());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("typo_key = 3").unwrap_err();
        assert!(err.to_string().contains("typo_key"));
        assert!(toml::from_str::<RunConfig>("[pretrain]\nbatch = 9").is_err());
        assert!(toml::from_str::<RunConfig>("[model.fusion]\nheads = 2").is_err());
    }

    #[test]
    fn partial_file_overrides_only_what_it_names() {
        let cfg: RunConfig = toml::from_str(
            "seed = 9\n[finetune]\ntask = \"vsr\"\n[pretrain.schedule]\ntotal_steps = 77\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.finetune.task, Task::Vsr);
        assert_eq!(cfg.pretrain.schedule.total_steps, 77);
        assert_eq!(cfg.pretrain.batch_frames, RunConfig::desk().pretrain.batch_frames);
    }

    #[test]
    fn stage_configs_inherit_global_seed_and_model() {
        let mut cfg = RunConfig::tiny();
        cfg.seed = 31;
        let p = cfg.pretrain_config();
        let f = cfg.finetune_config();
        assert_eq!(p.seed, 31);
        assert_eq!(f.seed, 31);
        assert_eq!(cfg.probe_config().seed, 31);
        assert_eq!(p.model, cfg.model);
        assert_eq!(f.model, cfg.model);
    }

    #[test]
    fn frame_clock_mismatch_is_rejected() {
        let mut cfg = RunConfig::tiny();
        cfg.data.samples_per_frame = 8;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("total stride"));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut cfg = RunConfig::tiny();
        cfg.version = 99;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_validation_runs_through_the_top_level() {
        let mut cfg = RunConfig::tiny();
        cfg.model.objective.directions = LossDirections::Both;
        cfg.pretrain.exclude = Some(Modality::Visual);
        assert!(cfg.validate().is_err());
    }
}
