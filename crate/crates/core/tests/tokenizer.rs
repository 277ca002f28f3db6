use candle_core::{DType, Device, Tensor};
use discrec::nn::ParamStore;
use discrec::tokenizer::{
    assign_ids, build_prefix_tree, quantize, train_tokenizer, CodebookSet, RqVaeNet, TokenizerConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_clusters(per: usize, dim: usize, seed: u64) -> (Vec<(String, Vec<f64>)>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect()).collect();
    let mut items = Vec::new();
    let mut truth = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            let v = center.iter().map(|m| m + rng.random_range(-0.5..0.5)).collect();
            items.push((format!("i{}", items.len()), v));
            truth.push(c);
        }
    }
    (items, truth)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm from farthest-point seeds.
fn kmeans_oracle(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut centers = vec![points[0].clone()];
    while centers.len() < k {
        let far = points
            .iter()
            .max_by(|a, b| {
                let da = centers.iter().map(|c| dist2(a, c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| dist2(b, c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        centers.push(far.clone());
    }
    let mut labels = vec![0; points.len()];
    for _ in 0..100 {
        for (i, p) in points.iter().enumerate() {
            labels[i] = (0..k).min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b]))).unwrap();
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for d in 0..center.len() {
                    center[d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    labels
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&n| choose2(n)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / choose2(a.len());
    let max = 0.5 * (rows + cols);
    (index - expected) / (max - expected)
}

#[test]
fn four_clusters_recovered_at_one_level() {
    let (items, _) = gaussian_clusters(30, 8, 21);
    let cfg = TokenizerConfig {
        levels: 1,
        codebook_size: 4,
        code_dim: 4,
        steps: 300,
        batch_size: 120,
        hidden_layers: 1,
        seed: 5,
        ..Default::default()
    };
    let (params, _) = train_tokenizer(&items, &cfg).unwrap();
    let learned: Vec<usize> = items.iter().map(|(_, z)| params.semantic_id(z).unwrap()[0] as usize).collect();
    let points: Vec<Vec<f64>> = items.iter().map(|(_, z)| z.clone()).collect();
    let oracle = kmeans_oracle(&points, 4);
    let ari = adjusted_rand_index(&learned, &oracle);
    assert!(ari >= 0.9, "ARI {ari}");
}

#[test]
fn single_item_is_reconstructed() {
    let z = vec![0.8, -0.3, 0.5, 0.1, -0.9, 0.4];
    let items = vec![("only".to_string(), z.clone())];
    let cfg = TokenizerConfig {
        levels: 1,
        codebook_size: 1,
        code_dim: 4,
        steps: 500,
        batch_size: 1,
        lr: 1e-2,
        hidden_layers: 1,
        standardize: false,
        seed: 2,
        ..Default::default()
    };
    let (params, report) = train_tokenizer(&items, &cfg).unwrap();
    let q = params.quantize(&params.encode(&z).unwrap()).unwrap();
    let z_hat = params.decode(&q.r_hat).unwrap();
    let recon: f64 = z_hat.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(recon < 1e-3, "recon {recon}, final loss {}", report.final_loss);
}

#[test]
fn trained_ids_are_unique_and_fill_the_trie() {
    let (items, _) = gaussian_clusters(10, 6, 3);
    let cfg = TokenizerConfig {
        levels: 2,
        codebook_size: 4,
        code_dim: 3,
        steps: 50,
        batch_size: 40,
        hidden_layers: 1,
        ..Default::default()
    };
    let (params, _) = train_tokenizer(&items, &cfg).unwrap();
    let (map, report) = assign_ids(&items, &params).unwrap();
    assert_eq!(map.len() + report.unassignable.len(), items.len());
    let trie = build_prefix_tree(&map).unwrap();
    assert_eq!(trie.len(), map.len());
    for (item, codes) in map.iter() {
        assert_eq!(trie.lookup(codes), Some(item));
    }
}

/// Evaluate one objective term of `live` (with stop-gradient values from
/// `frozen`) at the current parameters.
fn term(live: &RqVaeNet, frozen: &RqVaeNet, x: &Tensor, which: &str) -> f64 {
    let t = live.loss_terms(frozen, x).unwrap();
    let v = match which {
        "codebook" => t.codebook,
        "commit" => t.commit,
        _ => t.recon,
    };
    v.to_scalar::<f64>().unwrap()
}

fn central_difference(store: &ParamStore, name: &str, i: usize, h: f64, f: impl Fn() -> f64) -> f64 {
    let base = store.values(name).unwrap();
    let mut p = base.clone();
    p[i] += h;
    store.set(name, &p).unwrap();
    let up = f();
    p[i] = base[i] - h;
    store.set(name, &p).unwrap();
    let down = f();
    store.set(name, &base).unwrap();
    (up - down) / (2.0 * h)
}

#[test]
fn stop_gradient_cross_terms_vanish() {
    let cfg = TokenizerConfig { levels: 2, codebook_size: 3, code_dim: 2, hidden_layers: 1, ..Default::default() };
    let mut live_store = ParamStore::new(DType::F64, 9);
    let live = RqVaeNet::new(&mut live_store, 4, &cfg).unwrap();
    let mut frozen_store = ParamStore::new(DType::F64, 9);
    let frozen = RqVaeNet::new(&mut frozen_store, 4, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(x, (5, 4), &Device::Cpu).unwrap();

    let encoder_params: Vec<String> = live_store.names().filter(|n| n.starts_with("encoder")).map(String::from).collect();
    let codebook_params: Vec<String> = live_store.names().filter(|n| n.starts_with("codebook")).map(String::from).collect();
    let h = 1e-5;
    let mut control = 0.0f64;
    for name in &codebook_params {
        for i in 0..live_store.values(name).unwrap().len() {
            let fd = central_difference(&live_store, name, i, h, || term(&live, &frozen, &x, "commit"));
            assert!(fd.abs() < 1e-6, "commit term moves codebook {name}[{i}]: {fd}");
            control = control.max(central_difference(&live_store, name, i, h, || term(&live, &frozen, &x, "codebook")).abs());
        }
    }
    assert!(control > 1e-3, "codebook term should reach the codebooks");
    let mut control = 0.0f64;
    for name in &encoder_params {
        for i in 0..live_store.values(name).unwrap().len() {
            let fd = central_difference(&live_store, name, i, h, || term(&live, &frozen, &x, "codebook"));
            assert!(fd.abs() < 1e-6, "codebook term moves encoder {name}[{i}]: {fd}");
            control = control.max(central_difference(&live_store, name, i, h, || term(&live, &frozen, &x, "commit")).abs());
        }
    }
    assert!(control > 1e-3, "commitment term should reach the encoder");

    // autograd agrees: no gradient crosses either boundary
    let t = live.loss_terms(&live, &x).unwrap();
    let grads = t.commit.backward().unwrap();
    for name in &codebook_params {
        let g = grads.get(live_store.get(name).unwrap().as_tensor());
        assert!(g.is_none_or(|g| g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() == 0.0));
    }
    let grads = t.codebook.backward().unwrap();
    for name in &encoder_params {
        let g = grads.get(live_store.get(name).unwrap().as_tensor());
        assert!(g.is_none_or(|g| g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() == 0.0));
    }
}

fn random_books(rng: &mut ChaCha8Rng, levels: usize, k: usize, d: usize) -> CodebookSet {
    CodebookSet {
        codebook_size: k,
        code_dim: d,
        codes: (0..levels).map(|_| (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residuals_telescope(seed in any::<u64>(), levels in 1usize..5, k in 1usize..9, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books = random_books(&mut rng, levels, k, d);
        let r: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q = quantize(&r, &books).unwrap();
        let last = levels - 1;
        let e_last = books.entry(last, q.codes[last] as usize);
        for j in 0..d {
            let lhs = r[j] - q.r_hat[j];
            let rhs = q.residuals[last][j] - e_last[j];
            prop_assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn codebook_sums_quantize_to_themselves(seed in any::<u64>(), levels in 1usize..4) {
        // each level lives on a grid 100x finer than the previous one, so every
        // residual's nearest code is the one used to build it
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<f64> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].into_iter().flatten().collect();
        let books = CodebookSet {
            codebook_size: 4,
            code_dim: 2,
            codes: (0..levels).map(|l| grid.iter().map(|v| v * 100f64.powi(-(l as i32))).collect()).collect(),
        };
        let codes: Vec<u32> = (0..levels).map(|_| rng.random_range(0..4)).collect();
        let mut r = vec![0.0; 2];
        for (l, &c) in codes.iter().enumerate() {
            r.iter_mut().zip(books.entry(l, c as usize)).for_each(|(a, b)| *a += b);
        }
        let q = quantize(&r, &books).unwrap();
        prop_assert_eq!(&q.codes, &codes);
        let again = quantize(&q.r_hat, &books).unwrap();
        prop_assert_eq!(again.codes, codes);
    }
}
