//! End-to-end checks of the `beamfed` binary: gen, train, eval, report.

use std::path::Path;
use std::process::Command;

const MICRO_CONFIG: &str = r#"
[data]
n_data_test = 64
num_classes = 8
num_clients = 2
train_frac = 1.0

[scene]
street_length_m = 60.0
street_width_m = 14.0
num_base_stations = 2
bs_jitter_frac = 0.0
grid_nx = 18
grid_ny = 10
grid_margin_m = 1.0
extra_reflectors = 0
subcarriers_dl = 16
subcarriers_ul = 16
antennas_dl = 8
antennas_ul = 4
num_beams = 8
num_paths_dl = 2
num_paths_ul = 3

[federated]
lr = 0.1
server_lr = 1.0
lmbda = 0.0
fldropout = 0.1
fl_weight_decay = 0.00001
server_lr_decay_rate = 0.0
fl_local_lr_decay_rate = 0.0
eps = 0.2
flhiddenunits1 = 16
flhiddenunits2 = 16
epochs = 8
fl_min_rounds = 0
fl_patience = 10
fl_restarts = 1
clusters = 2
frac = 1.0
local_bs = 64
local_ep = 2
flfilters1 = 4
flfilters2 = 4
filtersize = 3
server_optim = "FedAvg"

[local]
loc_epochs = 8
local_lr = 0.05
localhiddenunits1 = 16
localhiddenunits2 = 16
localfilters1 = 4
localfilters2 = 4
filtersize = 3
localdropout = 0.1
local_patience = 10

[finetuning]
ft_lr = 0.02
ft_epochs = 5
ft_patience = 5

[moe]
moe_lr = 0.02
moe_epochs = 5
gatefilters1 = 2
gatefilters2 = 0
gatehiddenunits1 = 4
gatehiddenunits2 = 0
gatefiltersize = 3
gate_dropout = 0.0
moe_patience = 5

[sweep]
axis = "num_clusters"
values = [1.0]
repeats = 1
baselines = ["local", "single_global", "ifca", "finetuned", "moe"]
optimizers = ["fedavg"]
"#;

fn beamfed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_beamfed"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("micro.toml");
    std::fs::write(&path, MICRO_CONFIG).unwrap();
    path
}

#[test]
fn gen_is_deterministic_and_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for name in ["a.bin", "b.bin"] {
        let out = beamfed()
            .args(["gen", "--config"])
            .arg(&cfg)
            .args(["--seed", "11", "--out"])
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a.bin")).unwrap();
    let b = std::fs::read(dir.path().join("b.bin")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 11);
    assert!(sidecar["splits"].as_array().unwrap().len() == 2);
    assert!(sidecar["input_scale"].as_f64().unwrap() > 0.0);
}

#[test]
fn train_eval_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = beamfed()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--out"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "metrics.csv",
        "history_single.csv",
        "history_ifca.csv",
        "assignments.csv",
        "single_global.ckpt",
        "cluster0.ckpt",
        "cluster1.ckpt",
        "local_client0.ckpt",
        "finetuned_client1.ckpt",
        "moe_client0.moe",
    ] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(run_dir.join("history_ifca.csv")).unwrap();
    assert!(history.starts_with(
        "round,cluster_id,train_loss,val_loss,val_accuracy,cumulative_local_epochs,server_lr_t"
    ));
    let assignments = std::fs::read_to_string(run_dir.join("assignments.csv")).unwrap();
    assert!(assignments
        .starts_with("round,client_id,chosen_cluster,was_exploration,val_loss_cluster0"));

    // Evaluate a saved checkpoint against a saved dataset.
    let data_path = dir.path().join("d.bin");
    let out = beamfed()
        .args(["gen", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--out"])
        .arg(&data_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = beamfed()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--checkpoint"])
        .arg(run_dir.join("single_global.ckpt"))
        .args(["--dataset"])
        .arg(&data_path)
        .args(["--seed", "5", "--out"])
        .arg(dir.path().join("eval.csv"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pooled:"));
    // Re-running evaluation reproduces the output exactly.
    let first = std::fs::read(dir.path().join("eval.csv")).unwrap();
    let out = beamfed()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--checkpoint"])
        .arg(run_dir.join("single_global.ckpt"))
        .args(["--dataset"])
        .arg(&data_path)
        .args(["--seed", "5", "--out"])
        .arg(dir.path().join("eval2.csv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(first, std::fs::read(dir.path().join("eval2.csv")).unwrap());

    // Report renders per-figure files from the metrics CSV.
    let report_dir = dir.path().join("report");
    let out = beamfed()
        .args(["report", "--in"])
        .arg(run_dir.join("metrics.csv"))
        .args(["--out"])
        .arg(&report_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let acc = std::fs::read_to_string(report_dir.join("acc_vs_num_clusters_fedavg.csv")).unwrap();
    assert!(acc.starts_with("value,local,single_global,ifca,finetuned,moe"));
}
