use candle_core::{Device, Tensor};
use discrec::diagnostics::{
    attention_heatmaps, average_maps, branch_vectors, code_vectors, crop_matrix, export, norm_profile, norm_profiles,
    parse_matrix_csv, spearman, token_table_vectors, CropAnchor, NormSource,
};
use discrec::nn::Ctx;
use discrec::recommender::{build_variant, pad_left, Recommender, RecommenderConfig, Variant, ENCODER_SELF_ATTENTION};
use discrec::tokenizer::{CodebookSet, IdMap, Mlp, RqVaeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(variant: Variant, layers: usize, heads: usize) -> Recommender {
    let mut cfg = RecommenderConfig::new(variant, 3, 4, 12);
    cfg.backbone.layers = layers;
    cfg.backbone.dim = 16;
    cfg.backbone.heads = heads;
    cfg.backbone.head_dim = 8;
    cfg.backbone.ffn_dim = 32;
    cfg.branch.heads = 2;
    cfg.branch.head_dim = 8;
    cfg.branch.hidden = 32;
    cfg.max_len = 8;
    cfg.seed = 3;
    build_variant(&cfg).unwrap()
}

fn ids() -> IdMap {
    IdMap::from_pairs((0..12u32).map(|i| (format!("i{i}"), vec![i % 4, (i / 4) % 4, i % 3]))).unwrap()
}

#[test]
fn unit_vectors_give_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vectors: Vec<Vec<Vec<f64>>> = (0..5)
        .map(|_| {
            (0..4)
                .map(|_| {
                    let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        })
        .collect();
    let p = norm_profile(NormSource::Code, &vectors).unwrap();
    assert_eq!(p.values.len(), 4);
    assert!(p.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!(norm_profile(NormSource::Code, &[]).is_err());
}

#[test]
fn two_item_codebook_fixture() {
    let codebooks = CodebookSet {
        codebook_size: 2,
        code_dim: 2,
        codes: vec![vec![3.0, 4.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 2.0]],
    };
    let params = RqVaeParams {
        encoder: Mlp { layers: vec![] },
        decoder: Mlp { layers: vec![] },
        codebooks,
        beta: 0.25,
        standardizer: None,
    };
    let ids = IdMap::from_pairs([("a".to_string(), vec![0, 0]), ("b".to_string(), vec![1, 1])]).unwrap();
    let p = norm_profile(NormSource::Code, &code_vectors(&params, &ids)).unwrap();
    // a: |(3,4)| = 5, |(1,0)| = 1; b: |(0,1)| = 1, |(0,2)| = 2
    assert_eq!(p.values, vec![3.0, 1.5]);
    assert_eq!(p.spearman, Some(-1.0));
}

#[test]
fn spearman_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(2..10);
        let x: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
        let mut rank = vec![0.0; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = (r + 1) as f64;
        }
        let d2: f64 = rank.iter().zip(&x).map(|(r, xi)| (r - xi).powi(2)).sum();
        let nf = n as f64;
        let expected = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        assert!((spearman(&x, &y).unwrap() - expected).abs() < 1e-12);
    }
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
    let tied = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
    assert!(tied > 0.9 && tied < 1.0);
}

#[test]
fn semantic_profile_is_the_token_table_profile() {
    let ids = ids();
    for variant in [Variant::DiscRec, Variant::WoTF, Variant::Baseline] {
        let m = model(variant, 1, 2);
        let (semantic, collaborative) = branch_vectors(&m, &ids).unwrap();
        let raw = token_table_vectors(&m, &ids).unwrap();
        assert_eq!(semantic, raw);
        let a = norm_profile(NormSource::SemanticToken, &semantic).unwrap();
        let b = norm_profile(NormSource::SemanticToken, &raw).unwrap();
        assert_eq!(a, b);
        assert_eq!(collaborative.is_some(), variant != Variant::Baseline);
    }
    let profiles = norm_profiles(None, &model(Variant::DiscRec, 1, 2), &ids).unwrap();
    let sources: Vec<NormSource> = profiles.iter().map(|p| p.source).collect();
    assert_eq!(sources, vec![NormSource::SemanticToken, NormSource::CollaborativeToken]);
    assert!(profiles.iter().all(|p| p.values.len() == 3 && p.values.iter().all(|v| *v >= 0.0)));
}

fn inputs(m: &Recommender, ids: &IdMap, rng: &mut ChaCha8Rng, n: usize, len: Option<usize>) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let l = len.unwrap_or_else(|| rng.random_range(1..6));
            let h: Vec<String> = (0..l).map(|_| ids.item(rng.random_range(0..12)).to_string()).collect();
            m.input_tokens(&h, ids).unwrap()
        })
        .collect()
}

#[test]
fn captured_maps_are_row_stochastic() {
    let ids = ids();
    let m = model(Variant::DiscRec, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = pad_left(&inputs(&m, &ids, &mut rng, 5, None));
    let ctx = Ctx::capturing(ENCODER_SELF_ATTENTION);
    m.encode(&batch, &ctx).unwrap();
    let maps = ctx.take_captured();
    assert_eq!(maps.len(), 2);
    for p in &maps {
        let s = p.dim(3).unwrap();
        let flat: Vec<f64> = p.to_dtype(candle_core::DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for row in flat.chunks(s) {
            assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        for row in average_maps(p).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn averaging_and_cropping() {
    let uniform = Tensor::full(0.25f64, (2, 3, 4, 4), &Device::Cpu).unwrap();
    assert!(average_maps(&uniform).unwrap().iter().flatten().all(|x| (*x - 0.25).abs() < 1e-15));

    let ids = ids();
    let single = model(Variant::DiscRec, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pair = inputs(&single, &ids, &mut rng, 2, Some(4));
    let ctx = Ctx::capturing(ENCODER_SELF_ATTENTION);
    single.encode(&pair[..1], &ctx).unwrap();
    let head: Vec<Vec<f64>> = ctx.take_captured()[0].to_dtype(candle_core::DType::F64).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
    let one = attention_heatmaps(&single, &pair[..1], 100, CropAnchor::Start).unwrap();
    assert_eq!(one.layers[0], head);
    assert!(one.clamped);
    assert_eq!(one.crop, 13);

    let m = model(Variant::DiscRec, 2, 2);
    let a = attention_heatmaps(&m, &pair[..1], 8, CropAnchor::Start).unwrap();
    let b = attention_heatmaps(&m, &pair[1..], 8, CropAnchor::Start).unwrap();
    let both = attention_heatmaps(&m, &pair, 8, CropAnchor::Start).unwrap();
    assert!(!both.clamped);
    assert_eq!(both.layers.len(), 2);
    for l in 0..2 {
        for r in 0..8 {
            for c in 0..8 {
                let mean = (a.layers[l][r][c] + b.layers[l][r][c]) / 2.0;
                assert!((both.layers[l][r][c] - mean).abs() < 1e-6);
            }
        }
    }

    let m5: Vec<Vec<f64>> = (0..5).map(|r| (0..5).map(|c| (r * 5 + c) as f64).collect()).collect();
    assert_eq!(crop_matrix(&m5, 2, CropAnchor::Start), vec![vec![0.0, 1.0], vec![5.0, 6.0]]);
    assert_eq!(crop_matrix(&m5, 2, CropAnchor::End), vec![vec![18.0, 19.0], vec![23.0, 24.0]]);
}

#[test]
fn export_is_stable_and_round_trips() {
    let ids = ids();
    let m = model(Variant::DiscRec, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let profiles = norm_profiles(None, &m, &ids).unwrap();
    let heat = attention_heatmaps(&m, &inputs(&m, &ids, &mut rng, 3, None), 6, CropAnchor::Start).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export(&profiles, Some(&heat), dir.path()).unwrap();
    assert_eq!(files.len(), profiles.len() + 1 + 2);
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    let again = export(&profiles, Some(&heat), dir.path()).unwrap();
    assert_eq!(first, again.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>());

    let text = std::fs::read_to_string(dir.path().join("heatmap_layer2.csv")).unwrap();
    assert_eq!(parse_matrix_csv(&text).unwrap(), heat.layers[1]);
    let norms = std::fs::read_to_string(dir.path().join("norms_semantic_token.csv")).unwrap();
    assert!(norms.starts_with("level,mean_norm\n1,"));
    assert_eq!(norms.lines().count(), 4);
}
