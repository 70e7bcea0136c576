//! Experiment configuration, TOML or JSON, with keys named after the
//! hyperparameter tables so a full table pastes in directly (e.g.
//! `federated.local_ep`, `moe.gatefilters1`). Optional `[fedavg]` /
//! `[fedlion]` tables override optimizer-specific values when a sweep runs
//! both server optimizers.

use serde::{Deserialize, Serialize};

use crate::channel::{NoiseMode, NoiseModel, SceneConfig};
use crate::error::{Error, Result};
use crate::fed::{ConvergenceCfg, OptimizerKind, ServerOptCfg};
use crate::nn::{CnnArch, GateArch, LocalTrainCfg};
use crate::personalize::EarlyStopCfg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataCfg {
    /// -1 keeps every generated sample.
    pub n_data: i64,
    /// Bootstrap draws per client at evaluation time.
    pub n_data_test: usize,
    /// Number of beams B, the classifier output size.
    pub num_classes: usize,
    pub channels: usize,
    pub train_frac: f64,
    pub eval_num_clients: usize,
    pub num_clients: usize,
    /// "physics" or "fixed".
    pub add_noise: String,
    pub snr: f64,
    #[serde(rename = "ue_tx_power_dBm")]
    pub ue_tx_power_dbm: f64,
    #[serde(rename = "bs_tx_power_dBm")]
    pub bs_tx_power_dbm: f64,
    #[serde(rename = "noise_figure_dB")]
    pub noise_figure_db: f64,
    #[serde(rename = "interference_dB")]
    pub interference_db: f64,
    pub label_type: String,
    /// 0 = derive from the training-split RMS.
    pub input_scale: f64,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg {
            n_data: -1,
            n_data_test: 5000,
            num_classes: 64,
            channels: 2,
            train_frac: 0.1,
            eval_num_clients: 8,
            num_clients: 8,
            add_noise: "physics".into(),
            snr: 80.0,
            ue_tx_power_dbm: 23.0,
            bs_tx_power_dbm: 34.0,
            noise_figure_db: 5.0,
            interference_db: 0.0,
            label_type: "realistic".into(),
            input_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederatedCfg {
    pub lr: f64,
    pub server_lr: f64,
    pub lmbda: f64,
    pub fldropout: f64,
    pub fl_weight_decay: f64,
    pub server_lr_decay_rate: f64,
    pub fl_local_lr_decay_rate: f64,
    pub eps: f64,
    pub flhiddenunits1: usize,
    pub flhiddenunits2: usize,
    /// Maximum communication rounds.
    pub epochs: usize,
    /// Rounds before early stopping is armed.
    pub fl_min_rounds: usize,
    pub fl_patience: usize,
    /// Independent clustered-training restarts; the run with the best final
    /// validation loss wins. Escapes collapsed cluster assignments.
    pub fl_restarts: usize,
    pub clusters: usize,
    pub frac: f64,
    pub local_bs: usize,
    pub local_ep: usize,
    pub flfilters1: usize,
    pub flfilters2: usize,
    pub filtersize: usize,
    pub server_optim: String,
    pub beta1: f64,
    pub beta2: f64,
    /// Adaptivity constant of the FedAdam family; accepted, unused here.
    pub tau: f64,
    pub eval_every: usize,
}

impl Default for FederatedCfg {
    fn default() -> Self {
        FederatedCfg {
            lr: 0.003_416_91,
            server_lr: 0.000_272_589,
            lmbda: 0.000_463_701,
            fldropout: 0.583_516,
            fl_weight_decay: 2.102_18e-6,
            server_lr_decay_rate: 4.6406e-5,
            fl_local_lr_decay_rate: 1.008_85e-7,
            eps: 0.035_122_9,
            flhiddenunits1: 1024,
            flhiddenunits2: 2048,
            epochs: 4000,
            fl_min_rounds: 0,
            fl_patience: 5,
            fl_restarts: 1,
            clusters: 2,
            frac: 1.0,
            local_bs: 256,
            local_ep: 3,
            flfilters1: 128,
            flfilters2: 64,
            filtersize: 5,
            server_optim: "FedLion".into(),
            beta1: 0.95,
            beta2: 0.98,
            tau: 0.001,
            eval_every: 1,
        }
    }
}

/// Per-optimizer overrides applied when a sweep switches `server_optim`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOverrides {
    pub lr: Option<f64>,
    pub server_lr: Option<f64>,
    pub lmbda: Option<f64>,
    pub eps: Option<f64>,
    pub server_lr_decay_rate: Option<f64>,
    pub fl_weight_decay: Option<f64>,
    pub fldropout: Option<f64>,
    pub fl_local_lr_decay_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuningCfg {
    pub ft_lr: f64,
    pub ft_weight_decay: f64,
    pub ft_lr_decay_rate: f64,
    pub ft_patience: usize,
    pub ft_epochs: usize,
    pub ft_bs: usize,
}

impl Default for FinetuningCfg {
    fn default() -> Self {
        FinetuningCfg {
            ft_lr: 0.000_117_23,
            ft_weight_decay: 0.26246,
            ft_lr_decay_rate: 0.025_521,
            ft_patience: 10,
            ft_epochs: 400,
            ft_bs: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalCfg {
    pub loc_epochs: usize,
    pub local_lr: f64,
    pub local_weight_decay: f64,
    pub localdropout: f64,
    pub local_lr_decay_rate: f64,
    pub localhiddenunits1: usize,
    pub localhiddenunits2: usize,
    pub localfilters1: usize,
    pub localfilters2: usize,
    pub filtersize: usize,
    pub local_patience: usize,
    pub local_bs: usize,
}

impl Default for LocalCfg {
    fn default() -> Self {
        LocalCfg {
            loc_epochs: 400,
            local_lr: 0.001_097_89,
            local_weight_decay: 0.023_695_5,
            localdropout: 0.694_774,
            local_lr_decay_rate: 0.021_437_9,
            localhiddenunits1: 1024,
            localhiddenunits2: 2048,
            localfilters1: 128,
            localfilters2: 64,
            filtersize: 5,
            local_patience: 10,
            local_bs: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeCfg {
    pub moe_lr: f64,
    pub gate_dropout: f64,
    pub moe_lr_decay_rate: f64,
    pub gatefilters1: usize,
    pub gatefilters2: usize,
    pub gate_weight_decay: f64,
    pub moe_epochs: usize,
    pub gatehiddenunits1: usize,
    pub gatehiddenunits2: usize,
    pub gatefiltersize: usize,
    pub moe_patience: usize,
    pub moe_bs: usize,
}

impl Default for MoeCfg {
    fn default() -> Self {
        MoeCfg {
            moe_lr: 5.129_69e-6,
            gate_dropout: 0.413_556,
            moe_lr_decay_rate: 0.000_790_47,
            gatefilters1: 16,
            gatefilters2: 0,
            gate_weight_decay: 2.157_71e-6,
            moe_epochs: 400,
            gatehiddenunits1: 16,
            gatehiddenunits2: 8,
            gatefiltersize: 5,
            moe_patience: 10,
            moe_bs: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepCfg {
    pub axis: String,
    pub values: Vec<f64>,
    pub repeats: usize,
    pub baselines: Vec<String>,
    pub optimizers: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataCfg,
    pub scene: SceneConfig,
    pub federated: FederatedCfg,
    pub finetuning: FinetuningCfg,
    pub local: LocalCfg,
    pub moe: MoeCfg,
    pub fedavg: OptimizerOverrides,
    pub fedlion: OptimizerOverrides,
    pub sweep: SweepCfg,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.num_classes != self.scene.num_beams {
            return Err(Error::Config(format!(
                "data.num_classes ({}) must equal scene.num_beams ({})",
                self.data.num_classes, self.scene.num_beams
            )));
        }
        if self.data.num_clients != self.scene.num_base_stations {
            return Err(Error::Config(format!(
                "data.num_clients ({}) must equal scene.num_base_stations ({})",
                self.data.num_clients, self.scene.num_base_stations
            )));
        }
        match self.data.add_noise.as_str() {
            "physics" | "fixed" => {}
            other => {
                return Err(Error::Config(format!(
                    "data.add_noise must be \"physics\" or \"fixed\", got {other:?}"
                )))
            }
        }
        self.optimizer_kind()?;
        Ok(())
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.federated.server_optim.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(OptimizerKind::FedAvg),
            "fedlion" => Ok(OptimizerKind::FedLion),
            other => Err(Error::Config(format!("unknown server optimizer {other:?}"))),
        }
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            mode: if self.data.add_noise == "fixed" {
                NoiseMode::FixedSnr
            } else {
                NoiseMode::Physics
            },
            snr_db: self.data.snr,
            ue_tx_power_dbm: self.data.ue_tx_power_dbm,
            bs_tx_power_dbm: self.data.bs_tx_power_dbm,
            noise_figure_db: self.data.noise_figure_db,
        }
    }

    /// Federated section with the per-optimizer overrides applied.
    pub fn federated_for(&self, kind: OptimizerKind) -> FederatedCfg {
        let mut fed = self.federated.clone();
        fed.server_optim = kind.to_string();
        let o = match kind {
            OptimizerKind::FedAvg => &self.fedavg,
            OptimizerKind::FedLion => &self.fedlion,
        };
        if let Some(v) = o.lr {
            fed.lr = v;
        }
        if let Some(v) = o.server_lr {
            fed.server_lr = v;
        }
        if let Some(v) = o.lmbda {
            fed.lmbda = v;
        }
        if let Some(v) = o.eps {
            fed.eps = v;
        }
        if let Some(v) = o.server_lr_decay_rate {
            fed.server_lr_decay_rate = v;
        }
        if let Some(v) = o.fl_weight_decay {
            fed.fl_weight_decay = v;
        }
        if let Some(v) = o.fldropout {
            fed.fldropout = v;
        }
        if let Some(v) = o.fl_local_lr_decay_rate {
            fed.fl_local_lr_decay_rate = v;
        }
        fed
    }

    pub fn server_opt_cfg(&self, kind: OptimizerKind) -> ServerOptCfg {
        let fed = self.federated_for(kind);
        ServerOptCfg {
            kind,
            lr: fed.server_lr,
            lr_decay: fed.server_lr_decay_rate,
            lambda: fed.lmbda,
            beta1: fed.beta1,
            beta2: fed.beta2,
        }
    }

    pub fn convergence_cfg(&self, kind: OptimizerKind, seed: u64) -> ConvergenceCfg {
        let fed = self.federated_for(kind);
        ConvergenceCfg {
            local: LocalTrainCfg {
                epochs: fed.local_ep,
                batch_size: fed.local_bs,
                lr: fed.lr,
                lr_decay: fed.fl_local_lr_decay_rate,
                weight_decay: fed.fl_weight_decay,
            },
            fraction: fed.frac,
            max_rounds: fed.epochs,
            min_rounds: fed.fl_min_rounds,
            patience: fed.fl_patience,
            eval_every: fed.eval_every,
            seed,
        }
    }

    /// Architecture of the federated/global classifier.
    pub fn fl_arch(&self) -> CnnArch {
        CnnArch {
            in_channels: self.data.channels,
            conv1_filters: self.federated.flfilters1,
            conv2_filters: self.federated.flfilters2,
            filter_size: self.federated.filtersize,
            fc1_units: self.federated.flhiddenunits1,
            fc2_units: self.federated.flhiddenunits2,
            dropout_rate: self.federated.fldropout,
            num_classes: self.data.num_classes,
            input_h: self.scene.subcarriers_ul,
            input_w: self.scene.antennas_ul,
        }
    }

    /// Architecture of the purely local baseline model.
    pub fn local_arch(&self) -> CnnArch {
        CnnArch {
            in_channels: self.data.channels,
            conv1_filters: self.local.localfilters1,
            conv2_filters: self.local.localfilters2,
            filter_size: self.local.filtersize,
            fc1_units: self.local.localhiddenunits1,
            fc2_units: self.local.localhiddenunits2,
            dropout_rate: self.local.localdropout,
            num_classes: self.data.num_classes,
            input_h: self.scene.subcarriers_ul,
            input_w: self.scene.antennas_ul,
        }
    }

    pub fn gate_arch(&self) -> GateArch {
        GateArch {
            filters1: self.moe.gatefilters1,
            filters2: self.moe.gatefilters2,
            hidden1: self.moe.gatehiddenunits1,
            hidden2: self.moe.gatehiddenunits2,
            filter_size: self.moe.gatefiltersize,
            dropout: self.moe.gate_dropout,
            input_h: self.scene.subcarriers_ul,
            input_w: self.scene.antennas_ul,
        }
    }

    pub fn local_stop_cfg(&self) -> EarlyStopCfg {
        EarlyStopCfg {
            max_epochs: self.local.loc_epochs,
            patience: self.local.local_patience,
            batch_size: self.local.local_bs,
            lr: self.local.local_lr,
            lr_decay: self.local.local_lr_decay_rate,
            weight_decay: self.local.local_weight_decay,
        }
    }

    pub fn finetune_stop_cfg(&self) -> EarlyStopCfg {
        EarlyStopCfg {
            max_epochs: self.finetuning.ft_epochs,
            patience: self.finetuning.ft_patience,
            batch_size: self.finetuning.ft_bs,
            lr: self.finetuning.ft_lr,
            lr_decay: self.finetuning.ft_lr_decay_rate,
            weight_decay: self.finetuning.ft_weight_decay,
        }
    }

    pub fn moe_stop_cfg(&self) -> EarlyStopCfg {
        EarlyStopCfg {
            max_epochs: self.moe.moe_epochs,
            patience: self.moe.moe_patience,
            batch_size: self.moe.moe_bs,
            lr: self.moe.moe_lr,
            lr_decay: self.moe.moe_lr_decay_rate,
            weight_decay: self.moe.gate_weight_decay,
        }
    }

    /// Desk-scale profile: the mirrored two-sided street with eight
    /// stations, small grids and the tiny architecture. Fast enough for
    /// tests while keeping every qualitative property of the full-scale
    /// setup.
    pub fn desk() -> Self {
        ExperimentConfig {
            data: DataCfg {
                n_data_test: 1000,
                num_classes: 16,
                num_clients: 2,
                train_frac: 0.1,
                ..DataCfg::default()
            },
            scene: SceneConfig {
                street_length_m: 80.0,
                street_width_m: 16.0,
                num_base_stations: 2,
                bs_jitter_frac: 0.0,
                grid_nx: 112,
                grid_ny: 46,
                grid_margin_m: 1.0,
                extra_reflectors: 0,
                subcarriers_dl: 32,
                subcarriers_ul: 32,
                antennas_dl: 16,
                antennas_ul: 4,
                num_beams: 16,
                num_paths_dl: 3,
                num_paths_ul: 5,
                ..SceneConfig::default()
            },
            federated: FederatedCfg {
                lr: 0.25,
                server_lr: 1.0,
                lmbda: 0.0,
                fldropout: 0.1,
                fl_weight_decay: 1e-5,
                server_lr_decay_rate: 0.0,
                fl_local_lr_decay_rate: 0.0,
                eps: 0.08,
                flhiddenunits1: 32,
                flhiddenunits2: 32,
                epochs: 340,
                fl_min_rounds: 140,
                fl_patience: 10,
                fl_restarts: 4,
                clusters: 2,
                frac: 1.0,
                local_bs: 256,
                local_ep: 3,
                flfilters1: 8,
                flfilters2: 8,
                filtersize: 3,
                server_optim: "FedLion".into(),
                beta1: 0.95,
                beta2: 0.98,
                tau: 0.001,
                eval_every: 2,
            },
            fedavg: OptimizerOverrides {
                lr: Some(0.25),
                server_lr: Some(1.0),
                lmbda: Some(0.0),
                eps: Some(0.08),
                ..OptimizerOverrides::default()
            },
            fedlion: OptimizerOverrides {
                lr: Some(0.25),
                server_lr: Some(0.004),
                lmbda: Some(1e-4),
                eps: Some(0.08),
                ..OptimizerOverrides::default()
            },
            finetuning: FinetuningCfg {
                ft_lr: 0.01,
                ft_weight_decay: 0.1,
                ft_lr_decay_rate: 0.01,
                ft_patience: 10,
                ft_epochs: 120,
                ft_bs: 256,
            },
            local: LocalCfg {
                loc_epochs: 400,
                local_lr: 0.1,
                local_weight_decay: 0.02,
                localdropout: 0.3,
                local_lr_decay_rate: 0.003,
                localhiddenunits1: 32,
                localhiddenunits2: 32,
                localfilters1: 8,
                localfilters2: 8,
                filtersize: 3,
                local_patience: 20,
                local_bs: 256,
            },
            moe: MoeCfg {
                moe_lr: 0.05,
                gate_dropout: 0.2,
                moe_lr_decay_rate: 0.001,
                gatefilters1: 2,
                gatefilters2: 0,
                gate_weight_decay: 1e-5,
                moe_epochs: 300,
                gatehiddenunits1: 4,
                gatehiddenunits2: 0,
                gatefiltersize: 3,
                moe_patience: 20,
                moe_bs: 256,
            },
            sweep: SweepCfg {
                axis: "num_clusters".into(),
                values: vec![1.0, 2.0, 4.0],
                repeats: 3,
                baselines: vec![
                    "local".into(),
                    "single_global".into(),
                    "ifca".into(),
                    "finetuned".into(),
                    "moe".into(),
                ],
                optimizers: vec!["fedavg".into(), "fedlion".into()],
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_hyperparameter_tables() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.federated.beta1, 0.95);
        assert_eq!(cfg.federated.beta2, 0.98);
        assert_eq!(cfg.federated.local_ep, 3);
        assert_eq!(cfg.federated.local_bs, 256);
        assert_eq!(cfg.federated.clusters, 2);
        assert_eq!(cfg.federated.frac, 1.0);
        assert_eq!(cfg.federated.fl_patience, 5);
        assert_eq!(cfg.federated.eps, 0.035_122_9);
        assert_eq!(cfg.finetuning.ft_lr, 0.000_117_23);
        assert_eq!(cfg.finetuning.ft_patience, 10);
        assert_eq!(cfg.local.loc_epochs, 400);
        assert_eq!(cfg.local.local_patience, 10);
        assert_eq!(cfg.moe.gatefilters1, 16);
        assert_eq!(cfg.moe.gatehiddenunits2, 8);
        assert_eq!(cfg.moe.moe_patience, 10);
        assert_eq!(cfg.data.n_data_test, 5000);
        assert_eq!(cfg.data.num_classes, 64);
        assert_eq!(cfg.data.num_clients, 8);
        assert_eq!(cfg.data.ue_tx_power_dbm, 23.0);
        assert_eq!(cfg.data.bs_tx_power_dbm, 34.0);
        assert_eq!(cfg.data.noise_figure_db, 5.0);
        assert_eq!(cfg.scene.carrier_dl_hz, 28.0e9);
        assert_eq!(cfg.scene.carrier_ul_hz, 3.5e9);
        assert_eq!(cfg.scene.num_paths_dl, 5);
        assert_eq!(cfg.scene.num_paths_ul, 15);
    }

    #[test]
    fn toml_with_table_keys_parses() {
        let text = r#"
[data]
num_classes = 16
num_clients = 2
train_frac = 0.25
add_noise = "fixed"
snr = 30.0
ue_tx_power_dBm = 20.0

[scene]
num_base_stations = 2
num_beams = 16

[federated]
local_ep = 5
server_optim = "FedAvg"
eps = 0.01

[moe]
gatefilters1 = 8

[fedlion]
server_lr = 0.002
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.data.num_classes, 16);
        assert_eq!(cfg.data.ue_tx_power_dbm, 20.0);
        assert_eq!(cfg.federated.local_ep, 5);
        assert_eq!(cfg.optimizer_kind().unwrap(), OptimizerKind::FedAvg);
        assert_eq!(cfg.moe.gatefilters1, 8);
        let lion = cfg.federated_for(OptimizerKind::FedLion);
        assert_eq!(lion.server_lr, 0.002);
        assert_eq!(lion.eps, 0.01); // untouched by the override table
        assert_eq!(cfg.noise_model().mode, NoiseMode::FixedSnr);
    }

    #[test]
    fn mismatched_beam_count_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.num_classes = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_profile_is_consistent() {
        let cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        let arch = cfg.fl_arch();
        assert_eq!(arch.num_classes, 16);
        assert_eq!(arch.input_h, 32);
        assert_eq!(arch.input_w, 4);
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ExperimentConfig::desk();
        let v = cfg.to_json_value().unwrap();
        let back: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn shipped_config_files_match_the_profiles() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .parent()
            .unwrap()
            .parent()
            .unwrap();
        let desk = ExperimentConfig::load(root.join("configs/desk.toml")).unwrap();
        assert_eq!(desk, ExperimentConfig::desk());
        let full = ExperimentConfig::load(root.join("configs/full.toml")).unwrap();
        assert_eq!(full, ExperimentConfig::default());
    }
}
