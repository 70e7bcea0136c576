//! Client partitioning, splits, sampling and the federated dataset view.
//!
//! Candidate samples arrive one per (UE position, base station). Association
//! keeps the strongest-downlink candidate per position, which yields unequal
//! client sizes (quantity skew). Splits are per client: 20% test, then 10%
//! of the remainder as validation, the rest training — all index-based into
//! a shared sample store.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{capacity, ChannelSample, Codebook};
use crate::error::{Error, Result};
use crate::fed::ClientData;
use crate::nn::{Tensor, TensorDataset};
use crate::rng;

/// Index lists of one client into the shared store.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientPartition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientPartition {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// The federated dataset: shared sample store plus per-client splits.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub store: Arc<Vec<ChannelSample>>,
    pub clients: Vec<ClientPartition>,
    pub seed: u64,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sample(&self, index: usize) -> &ChannelSample {
        &self.store[index]
    }
}

/// Keep, per UE position, the candidate of the base station with the highest
/// best-beam downlink capacity (ties to the lowest station id), then split
/// each client 20% test / 10%-of-rest validation / rest training.
pub fn partition_by_strongest_bs(
    candidates: Vec<ChannelSample>,
    num_clients: usize,
    codebook: &Codebook,
    subcarrier_bandwidth_dl: f64,
    seed: u64,
) -> Result<FederatedDataset> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate samples"));
    }
    let num_positions = candidates.iter().map(|s| s.ue_index).max().unwrap() + 1;
    // best_cap[ue] and the winning candidate index.
    let mut winner: Vec<Option<(f64, usize, usize)>> = vec![None; num_positions];
    for (i, s) in candidates.iter().enumerate() {
        if s.client_id >= num_clients {
            return Err(Error::invalid("candidate client id out of range"));
        }
        let cap = capacity(&s.h_dl, s.label, codebook, subcarrier_bandwidth_dl)?;
        let better = match winner[s.ue_index] {
            None => true,
            Some((best_cap, best_bs, _)) => {
                cap > best_cap || (cap == best_cap && s.client_id < best_bs)
            }
        };
        if better {
            winner[s.ue_index] = Some((cap, s.client_id, i));
        }
    }
    let mut keep: Vec<usize> = Vec::with_capacity(num_positions);
    for w in &winner {
        match w {
            Some((_, _, idx)) => keep.push(*idx),
            None => return Err(Error::invalid("UE position without candidates")),
        }
    }
    // Move the winning samples into the store in UE order.
    let mut slots: Vec<Option<ChannelSample>> = candidates.into_iter().map(Some).collect();
    let store: Vec<ChannelSample> = keep
        .into_iter()
        .map(|i| slots[i].take().expect("winner taken once"))
        .collect();
    from_associated(store, num_clients, seed)
}

/// Build splits over samples that already carry their owning client id.
pub fn from_associated(
    store: Vec<ChannelSample>,
    num_clients: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (i, s) in store.iter().enumerate() {
        if s.client_id >= num_clients {
            return Err(Error::invalid("sample client id out of range"));
        }
        per_client[s.client_id].push(i);
    }
    let mut clients = Vec::with_capacity(num_clients);
    for (k, mut idxs) in per_client.into_iter().enumerate() {
        let mut split_rng = rng::stream(seed, &[rng::TAG_SPLIT, k as u64]);
        idxs.shuffle(&mut split_rng);
        let n = idxs.len();
        let n_test = n / 5;
        let n_val = (n - n_test) / 10;
        let mut test: Vec<usize> = idxs[..n_test].to_vec();
        let mut val: Vec<usize> = idxs[n_test..n_test + n_val].to_vec();
        let mut train: Vec<usize> = idxs[n_test + n_val..].to_vec();
        test.sort_unstable();
        val.sort_unstable();
        train.sort_unstable();
        clients.push(ClientPartition { train, val, test });
    }
    Ok(FederatedDataset {
        store: Arc::new(store),
        clients,
        seed,
    })
}

/// Keep a seeded uniform subset of ceil(fraction * |train|) training indices
/// per client; validation and test splits are untouched.
pub fn subsample_train(dataset: &FederatedDataset, fraction: f64) -> Result<FederatedDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("train fraction must be in (0, 1]"));
    }
    let mut clients = Vec::with_capacity(dataset.clients.len());
    for (k, part) in dataset.clients.iter().enumerate() {
        if fraction == 1.0 {
            clients.push(part.clone());
            continue;
        }
        let keep = (fraction * part.train.len() as f64).ceil() as usize;
        let mut idxs = part.train.clone();
        let mut sub_rng = rng::stream(dataset.seed, &[rng::TAG_SUBSAMPLE, k as u64]);
        idxs.shuffle(&mut sub_rng);
        let mut train: Vec<usize> = idxs[..keep].to_vec();
        train.sort_unstable();
        clients.push(ClientPartition {
            train,
            val: part.val.clone(),
            test: part.test.clone(),
        });
    }
    Ok(FederatedDataset {
        store: Arc::clone(&dataset.store),
        clients,
        seed: dataset.seed,
    })
}

/// Per-client bootstrap of the test split: `n_draws` draws with replacement,
/// from a per-client substream of `seed`.
pub fn bootstrap_test(
    dataset: &FederatedDataset,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(dataset.clients.len());
    for (k, part) in dataset.clients.iter().enumerate() {
        if part.test.is_empty() {
            return Err(Error::invalid(format!("client {k} has an empty test set")));
        }
        let mut draw_rng = rng::stream(seed, &[rng::TAG_BOOTSTRAP, k as u64]);
        let draws: Vec<usize> = (0..n_draws)
            .map(|_| part.test[draw_rng.gen_range(0..part.test.len())])
            .collect();
        out.push(draws);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tensor views
// ---------------------------------------------------------------------------

/// Root-mean-square of |h_ul| entries over all training samples; the inverse
/// is the network input scale, so features land at unit magnitude.
pub fn train_input_rms(dataset: &FederatedDataset) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for part in &dataset.clients {
        for &i in &part.train {
            let h = &dataset.store[i].h_ul;
            acc += h.data().iter().map(|c| c.norm_sqr()).sum::<f64>();
            count += h.data().len();
        }
    }
    if count == 0 {
        1.0
    } else {
        (acc / count as f64).sqrt()
    }
}

/// Real/imaginary two-channel tensor for a list of store indices.
pub fn tensor_for(dataset: &FederatedDataset, indices: &[usize], input_scale: f64) -> TensorDataset {
    let (h, w) = match indices.first() {
        Some(&i) => (
            dataset.store[i].h_ul.subcarriers(),
            dataset.store[i].h_ul.antennas(),
        ),
        None => (0, 0),
    };
    let mut x = Vec::with_capacity(indices.len() * 2 * h * w);
    let mut y = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.store[i];
        for c in s.h_ul.data() {
            x.push((c.re * input_scale) as f32);
        }
        for c in s.h_ul.data() {
            x.push((c.im * input_scale) as f32);
        }
        y.push(s.label);
    }
    TensorDataset {
        x,
        y,
        channels: 2,
        height: h,
        width: w,
    }
}

/// A single sample as a `[1, 2, h, w]` input tensor.
pub fn input_tensor(sample: &ChannelSample, input_scale: f64) -> Tensor {
    let h = sample.h_ul.subcarriers();
    let w = sample.h_ul.antennas();
    let mut data = Vec::with_capacity(2 * h * w);
    for c in sample.h_ul.data() {
        data.push((c.re * input_scale) as f32);
    }
    for c in sample.h_ul.data() {
        data.push((c.im * input_scale) as f32);
    }
    Tensor {
        data,
        shape: vec![1, 2, h, w],
        grad: None,
    }
}

/// Train/validation tensors for every client.
pub fn client_tensors(dataset: &FederatedDataset, input_scale: f64) -> Vec<ClientData> {
    dataset
        .clients
        .iter()
        .map(|part| ClientData {
            train: tensor_for(dataset, &part.train, input_scale),
            val: tensor_for(dataset, &part.val, input_scale),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sidecar manifest
// ---------------------------------------------------------------------------

/// JSON sidecar next to a dataset file: the generating config, seed, input
/// scale and the split manifests, so an experiment is reconstructible from
/// (dataset file, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: serde_json::Value,
    pub seed: u64,
    pub input_scale: f64,
    pub splits: Vec<ClientPartition>,
}

pub fn write_sidecar(path: impl AsRef<std::path::Path>, sidecar: &Sidecar) -> Result<()> {
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_sidecar(path: impl AsRef<std::path::Path>) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Search for a concept-shift witness: two test samples of different clients
/// whose flattened |h_ul| vectors have cosine similarity above `threshold`
/// but different labels. Returns the store indices of the best such pair.
pub fn find_concept_shift_pair(
    dataset: &FederatedDataset,
    threshold: f64,
) -> Option<(usize, usize, f64)> {
    // Precompute normalized magnitude vectors of all test samples.
    let mut entries: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (k, part) in dataset.clients.iter().enumerate() {
        for &i in &part.test {
            let mags: Vec<f64> = dataset.store[i].h_ul.data().iter().map(|c| c.norm()).collect();
            let norm = mags.iter().map(|m| m * m).sum::<f64>().sqrt();
            if norm > 0.0 {
                entries.push((k, i, mags.iter().map(|m| m / norm).collect()));
            }
        }
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for a in 0..entries.len() {
        for b in (a + 1)..entries.len() {
            let (ka, ia, va) = &entries[a];
            let (kb, ib, vb) = &entries[b];
            if ka == kb || dataset.store[*ia].label == dataset.store[*ib].label {
                continue;
            }
            let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
            if dot > threshold && best.map_or(true, |(_, _, d)| dot > d) {
                best = Some((*ia, *ib, dot));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        build_codebook, generate_scene, synthesize_channels, CGrid, NoiseModel,
        SceneConfig,
    };

    fn steering_grid(cb: &Codebook, beam: usize, subcarriers: usize, gain: f64) -> CGrid {
        let m = cb.num_antennas();
        let mut data = Vec::with_capacity(subcarriers * m);
        for _ in 0..subcarriers {
            for i in 0..m {
                // Matched channel: h = f(beam), so |h^H f(beam)| peaks there.
                data.push(cb.entry(i, beam) * gain * (m as f64).sqrt());
            }
        }
        CGrid::from_data(data, subcarriers, m).unwrap()
    }

    fn candidate(
        cb: &Codebook,
        ue: usize,
        bs: usize,
        beam: usize,
        gain: f64,
    ) -> ChannelSample {
        ChannelSample {
            h_ul: CGrid::zeros(4, 2),
            h_dl: steering_grid(cb, beam, 2, gain),
            label: beam,
            client_id: bs,
            ue_index: ue,
            ul_snr_db: 50.0,
        }
    }

    #[test]
    fn association_keeps_strongest_station() {
        let cb = build_codebook(8, 8).unwrap();
        // UE 0: station 1 is 10x stronger. UE 1: station 0 stronger.
        let candidates = vec![
            candidate(&cb, 0, 0, 2, 0.1),
            candidate(&cb, 0, 1, 5, 1.0),
            candidate(&cb, 1, 0, 3, 2.0),
            candidate(&cb, 1, 1, 6, 0.5),
        ];
        let fd = partition_by_strongest_bs(candidates, 2, &cb, 1.0, 7).unwrap();
        assert_eq!(fd.store.len(), 2);
        assert_eq!(fd.store[0].client_id, 1);
        assert_eq!(fd.store[1].client_id, 0);
    }

    #[test]
    fn association_tie_goes_to_lowest_station() {
        let cb = build_codebook(8, 8).unwrap();
        // Identical channels from both stations: bitwise-equal capacities.
        let candidates = vec![
            candidate(&cb, 0, 1, 4, 1.0),
            candidate(&cb, 0, 0, 4, 1.0),
        ];
        let fd = partition_by_strongest_bs(candidates, 2, &cb, 1.0, 7).unwrap();
        assert_eq!(fd.store[0].client_id, 0);
    }

    #[test]
    fn association_is_a_partition() {
        let cb = build_codebook(8, 8).unwrap();
        let mut candidates = Vec::new();
        for ue in 0..10 {
            for bs in 0..3 {
                candidates.push(candidate(&cb, ue, bs, (ue + bs) % 8, 1.0 + bs as f64 * 0.1));
            }
        }
        let fd = partition_by_strongest_bs(candidates, 3, &cb, 1.0, 9).unwrap();
        assert_eq!(fd.store.len(), 10);
        let assigned: usize = fd.clients.iter().map(|c| c.total()).sum();
        assert_eq!(assigned, 10);
    }

    fn synth_dataset(num_bs: usize, nx: usize, ny: usize, jitter: f64, seed: u64) -> FederatedDataset {
        let cfg = SceneConfig {
            street_length_m: 80.0,
            street_width_m: 16.0,
            num_base_stations: num_bs,
            bs_jitter_frac: jitter,
            grid_nx: nx,
            grid_ny: ny,
            grid_margin_m: 1.0,
            extra_reflectors: 2,
            subcarriers_dl: 16,
            subcarriers_ul: 16,
            antennas_dl: 16,
            antennas_ul: 4,
            num_beams: 16,
            num_paths_dl: 3,
            num_paths_ul: 5,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, seed).unwrap();
        let noise = NoiseModel::default();
        let samples = synthesize_channels(&scene, &noise, seed);
        let cb = build_codebook(cfg.antennas_dl, cfg.num_beams).unwrap();
        partition_by_strongest_bs(samples, num_bs, &cb, scene.subcarrier_bandwidth_dl(), seed)
            .unwrap()
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let fd = synth_dataset(2, 12, 10, 0.0, 3);
        for part in &fd.clients {
            let n = part.total();
            assert_eq!(part.test.len(), n / 5);
            assert_eq!(part.val.len(), (n - n / 5) / 10);
            let mut all: Vec<usize> = part
                .train
                .iter()
                .chain(&part.val)
                .chain(&part.test)
                .copied()
                .collect();
            let before = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), before);
        }
        let total: usize = fd.clients.iter().map(|c| c.total()).sum();
        assert_eq!(total, 120);
    }

    #[test]
    fn splits_are_deterministic() {
        let a = synth_dataset(2, 8, 6, 0.0, 5);
        let b = synth_dataset(2, 8, 6, 0.0, 5);
        assert_eq!(a.clients, b.clients);
    }

    #[test]
    fn default_scene_shows_quantity_skew() {
        let fd = synth_dataset(8, 30, 10, 0.3, 11);
        let sizes: Vec<usize> = fd.clients.iter().map(|c| c.total()).collect();
        let max = *sizes.iter().max().unwrap();
        let min = *sizes.iter().min().unwrap();
        assert!(max > min, "expected unequal client sizes, got {sizes:?}");
    }

    #[test]
    fn mirrored_scene_has_concept_shift_pair() {
        let fd = synth_dataset(2, 16, 10, 0.0, 13);
        let pair = find_concept_shift_pair(&fd, 0.99);
        assert!(pair.is_some(), "no cross-client near-identical pair found");
        let (a, b, sim) = pair.unwrap();
        assert!(sim > 0.99);
        assert_ne!(fd.store[a].label, fd.store[b].label);
        assert_ne!(fd.store[a].client_id, fd.store[b].client_id);
    }

    #[test]
    fn subsample_identity_at_full_fraction() {
        let fd = synth_dataset(2, 8, 6, 0.0, 5);
        let sub = subsample_train(&fd, 1.0).unwrap();
        assert_eq!(sub.clients, fd.clients);
    }

    #[test]
    fn subsample_keeps_ceil_fraction() {
        let fd = synth_dataset(2, 10, 8, 0.0, 5);
        let before: Vec<usize> = fd.clients.iter().map(|c| c.train.len()).collect();
        let sub = subsample_train(&fd, 0.1).unwrap();
        for (part, b) in sub.clients.iter().zip(&before) {
            assert_eq!(part.train.len(), (0.1f64 * *b as f64).ceil() as usize);
        }
        // val/test untouched
        for (a, b) in sub.clients.iter().zip(&fd.clients) {
            assert_eq!(a.val, b.val);
            assert_eq!(a.test, b.test);
        }
        // deterministic
        let sub2 = subsample_train(&fd, 0.1).unwrap();
        assert_eq!(sub.clients, sub2.clients);
    }

    #[test]
    fn bootstrap_zero_draws_is_empty() {
        let fd = synth_dataset(2, 8, 6, 0.0, 5);
        let draws = bootstrap_test(&fd, 0, 1).unwrap();
        assert!(draws.iter().all(|d| d.is_empty()));
    }

    #[test]
    fn bootstrap_singleton_test_set_repeats() {
        let cb = build_codebook(8, 8).unwrap();
        // 5 samples on one client: test split gets exactly one sample.
        let candidates: Vec<ChannelSample> =
            (0..5).map(|ue| candidate(&cb, ue, 0, 1, 1.0)).collect();
        let fd = partition_by_strongest_bs(candidates, 1, &cb, 1.0, 3).unwrap();
        assert_eq!(fd.clients[0].test.len(), 1);
        let draws = bootstrap_test(&fd, 64, 9).unwrap();
        assert!(draws[0].iter().all(|&i| i == fd.clients[0].test[0]));
    }

    #[test]
    fn bootstrap_draws_are_roughly_uniform() {
        let fd = synth_dataset(2, 10, 8, 0.0, 5);
        let test_len = fd.clients[0].test.len();
        let n_draws = 200 * test_len;
        let draws = bootstrap_test(&fd, n_draws, 17).unwrap();
        let mut counts = std::collections::HashMap::new();
        for &i in &draws[0] {
            *counts.entry(i).or_insert(0usize) += 1;
        }
        // Chi-squared against uniform, dof = s - 1; bound dof + 5 sqrt(2 dof).
        let expect = n_draws as f64 / test_len as f64;
        let chi2: f64 = fd.clients[0]
            .test
            .iter()
            .map(|i| {
                let obs = *counts.get(i).unwrap_or(&0) as f64;
                (obs - expect).powi(2) / expect
            })
            .sum();
        let dof = (test_len - 1) as f64;
        assert!(chi2 < dof + 5.0 * (2.0 * dof).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn tensors_scale_and_shape() {
        let fd = synth_dataset(2, 8, 6, 0.0, 5);
        let rms = train_input_rms(&fd);
        assert!(rms > 0.0);
        let scale = 1.0 / rms;
        let clients = client_tensors(&fd, scale);
        assert_eq!(clients.len(), 2);
        let t = &clients[0].train;
        assert_eq!(t.channels, 2);
        assert_eq!(t.height, 16);
        assert_eq!(t.width, 4);
        assert_eq!(t.len(), fd.clients[0].train.len());
        // Scaled inputs should be O(1).
        let max = t.x.iter().fold(0f32, |a, &v| a.max(v.abs()));
        assert!(max > 0.05 && max < 100.0, "max scaled input {max}");
    }

    #[test]
    fn sidecar_roundtrip() {
        let fd = synth_dataset(2, 8, 6, 0.0, 5);
        let sc = Sidecar {
            config: serde_json::json!({"scene": {"num_base_stations": 2}}),
            seed: fd.seed,
            input_scale: 1.25,
            splits: fd.clients.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        write_sidecar(&path, &sc).unwrap();
        let back = read_sidecar(&path).unwrap();
        assert_eq!(back.seed, sc.seed);
        assert_eq!(back.splits, sc.splits);
        assert_eq!(back.input_scale, sc.input_scale);
    }
}
