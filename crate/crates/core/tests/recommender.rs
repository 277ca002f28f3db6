use candle_core::{DType, Device, Tensor};
use discrec::data::Sample;
use discrec::dual_branch::Side;
use discrec::nn::Ctx;
use discrec::recommender::{
    build_variant, evaluate_loss, make_examples, pad_left, rec_loss, train_recommender, Activation, Precision,
    Recommender, RecommenderConfig, TrainConfig, Variant,
};
use discrec::tokenizer::{IdMap, EOS, NUM_SPECIALS, PAD};
use discrec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const L: usize = 2;
const K: usize = 4;

fn tiny(variant: Variant, seed: u64) -> RecommenderConfig {
    let mut cfg = RecommenderConfig::new(variant, L, K, 10);
    cfg.backbone.layers = 1;
    cfg.backbone.dim = 8;
    cfg.backbone.heads = 2;
    cfg.backbone.head_dim = 4;
    cfg.backbone.ffn_dim = 16;
    cfg.backbone.dropout = 0.0;
    cfg.backbone.relative_buckets = 8;
    cfg.backbone.relative_max_distance = 16;
    cfg.branch.heads = 2;
    cfg.branch.head_dim = 4;
    cfg.branch.hidden = 16;
    cfg.branch.dropout = 0.0;
    cfg.max_len = 5;
    cfg.seed = seed;
    cfg.precision = Precision::F64;
    cfg
}

fn model(variant: Variant, seed: u64) -> Recommender {
    build_variant(&tiny(variant, seed)).unwrap()
}

/// Ten items with distinct two-level codes.
fn ids() -> IdMap {
    IdMap::from_pairs((0..10u32).map(|i| (format!("i{i}"), vec![i / K as u32, i % K as u32]))).unwrap()
}

fn history(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len).map(|_| format!("i{}", rng.random_range(0..10))).collect()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let t = t.to_dtype(DType::F64).unwrap();
    let d = *t.dims().last().unwrap();
    values(&t).chunks(d).map(<[f64]>::to_vec).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn embedding_shapes_and_lookup() {
    let m = model(Variant::DiscRec, 0);
    let table = rows(&m.embed);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in 0..5 {
        let x: Vec<u32> = (0..L * t).map(|_| rng.random_range(NUM_SPECIALS..m.vocab.size() as u32)).collect();
        let ex = m.embed_input(&x).unwrap();
        assert_eq!(ex.dims(), &[L * t + 1, 8]);
        let got = rows(&ex);
        for (p, &tok) in x.iter().chain([EOS].iter()).enumerate() {
            assert_eq!(got[p], table[tok as usize]);
        }
        let y: Vec<u32> = (0..L).map(|_| rng.random_range(NUM_SPECIALS..m.vocab.size() as u32)).collect();
        assert_eq!(m.embed_target(&y).unwrap().dims(), &[L + 1, 8]);
    }
    assert_eq!(rows(&m.embed_input(&[]).unwrap()), vec![table[EOS as usize].clone()]);
    assert!(m.embed_input(&[m.vocab.size() as u32]).is_err());
}

#[test]
fn input_tokens_layout() {
    let ids = ids();
    let m = model(Variant::DiscRec, 0);
    let h: Vec<String> = (0..7).map(|i| format!("i{i}")).collect();
    let tokens = m.input_tokens(&h, &ids).unwrap();
    // the five most recent items, then EOS
    assert_eq!(tokens.len(), 5 * L + 1);
    assert_eq!(tokens[..L], m.vocab.tokenize_target("i2", &ids).unwrap()[..]);
    assert_eq!(*tokens.last().unwrap(), EOS);

    let ie = model(Variant::WithIE, 0);
    let tokens = ie.input_tokens(&h[..2], &ids).unwrap();
    let v = ie.vocab.size() as u32;
    assert_eq!(tokens.len(), 2 * (L + 1) + 1);
    assert_eq!(tokens[L], v);
    assert_eq!(tokens[2 * L + 1], v + 1);
    assert!(ie.embed_tokens(&[tokens]).is_ok());
    assert!(ie.embed_tokens(&[vec![v + 10]]).is_err());

    assert_eq!(pad_left(&[vec![5, 6], vec![7]]), vec![vec![5, 6], vec![PAD, 7]]);
}

#[test]
fn variant_parameters() {
    let pe = model(Variant::WithPE, 0);
    assert_eq!(pe.pos_embed.as_ref().unwrap().dims(), &[5 * L + 1, 8]);
    assert!(pe.embedding_module().is_none());
    assert!(model(Variant::Baseline, 0).embedding_module().is_none());
    assert_eq!(model(Variant::WithIE, 0).item_embed.as_ref().unwrap().dims(), &[10, 8]);
    assert_eq!(model(Variant::AllLayer, 0).layer_duals.len(), 1);
    assert!("NoSuchVariant".parse::<Variant>().is_err());

    let full: Vec<String> = model(Variant::DiscRec, 0).store.names().map(String::from).collect();
    let wo: Vec<String> = model(Variant::WoIPE, 0).store.names().map(String::from).collect();
    let diff: Vec<&String> = full.iter().filter(|n| !wo.contains(n)).collect();
    assert_eq!(diff, vec!["ipe.table"]);
    assert!(wo.iter().all(|n| full.contains(n)));
}

fn encoder_batch(rng: &mut ChaCha8Rng, m: &Recommender, ids: &IdMap) -> Vec<Vec<u32>> {
    let seqs: Vec<Vec<u32>> =
        [3, 1, 5].iter().map(|&n| m.input_tokens(&history(rng, n), ids).unwrap()).collect();
    pad_left(&seqs)
}

#[test]
fn pad_rows_do_not_leak() {
    let ids = ids();
    for variant in Variant::ALL {
        let m = model(variant, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = encoder_batch(&mut rng, &m, &ids);
        let ctx = Ctx::eval();
        let before = m.encode(&batch, &ctx).unwrap();
        let mut table = m.store.values("embed.table").unwrap();
        for v in table.iter_mut().take(8) {
            *v += rng.random_range(-3.0..3.0);
        }
        m.store.set("embed.table", &table).unwrap();
        let after = m.encode(&batch, &ctx).unwrap();
        let (b, a) = (rows(&before), rows(&after));
        for (r, &tok) in batch.iter().flatten().enumerate() {
            if tok != PAD {
                assert_eq!(b[r], a[r], "{variant}: row {r}");
            }
        }
        // the same history without padding gives the same rows
        let short = &batch[1];
        let start = short.iter().position(|&t| t != PAD).unwrap();
        let alone = rows(&m.encode(&[short[start..].to_vec()], &ctx).unwrap());
        let s = short.len();
        for p in start..s {
            assert!(max_abs_diff(&alone[p - start], &a[s + p]) < 1e-10, "{variant}: position {p}");
        }
    }
}

#[test]
fn decoder_is_causal_and_reads_memory() {
    let ids = ids();
    for variant in Variant::ALL {
        let m = model(variant, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = encoder_batch(&mut rng, &m, &ids);
        let ctx = Ctx::eval();
        let memory = m.encode(&enc, &ctx).unwrap();
        let targets: Vec<Vec<u32>> =
            (0..3).map(|_| m.vocab.tokenize_target(&history(&mut rng, 1)[0], &ids).unwrap()).collect();
        let dec: Vec<Vec<u32>> = targets.iter().map(|y| m.decoder_input(y)).collect();
        let base = m.decode(&memory, &enc, &dec, &ctx).unwrap();
        assert_eq!(base.dims(), &[3, L + 1, 8]);
        let base = rows(&base);
        for t in 1..=L {
            let mut changed = dec.clone();
            for row in changed.iter_mut() {
                let (level, code) = m.vocab.split(row[t]).unwrap();
                row[t] = m.vocab.token(level, (code + 1) % K as u32);
            }
            let out = rows(&m.decode(&memory, &enc, &changed, &ctx).unwrap());
            for b in 0..3 {
                for r in 0..t {
                    let i = b * (L + 1) + r;
                    assert!(max_abs_diff(&out[i], &base[i]) < 1e-12, "{variant}: step {t} row {r}");
                }
                let i = b * (L + 1) + t;
                assert!(max_abs_diff(&out[i], &base[i]) > 1e-9, "{variant}: step {t} unaffected");
            }
        }
        let zero = m.decode(&memory.zeros_like().unwrap(), &enc, &dec, &ctx).unwrap();
        assert!(max_abs_diff(&values(&zero), &base.concat()) > 1e-6, "{variant}");
    }
}

#[test]
fn logits_are_inner_products_with_specials_masked() {
    let m = model(Variant::DiscRec, 5);
    let v = m.vocab.size();
    let zero = Tensor::zeros((1, 2, 8), DType::F64, &Device::Cpu).unwrap();
    for row in rows(&m.token_logits(&zero).unwrap()) {
        assert!(row[..NUM_SPECIALS as usize].iter().all(|x| *x == f64::NEG_INFINITY));
        assert!(row[NUM_SPECIALS as usize..].iter().all(|x| *x == 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let logits = rows(&m.token_logits(&Tensor::from_vec(h.clone(), (1, 2, 8), &Device::Cpu).unwrap()).unwrap());
    let table = rows(&m.embed);
    for (r, hr) in h.chunks(8).enumerate() {
        for tok in NUM_SPECIALS as usize..v {
            let dot: f64 = hr.iter().zip(&table[tok]).map(|(a, b)| a * b).sum();
            assert!((logits[r][tok] - dot).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_closed_forms_and_oracle() {
    let v = 3 + L * K;
    let mut mask = vec![0.0; v];
    mask[..3].fill(f64::NEG_INFINITY);
    let uniform = Tensor::from_vec(mask.repeat(2 * L), (2, L, v), &Device::Cpu).unwrap();
    let targets = vec![vec![3, 3 + K as u32], vec![4, 4 + K as u32]];
    let loss = rec_loss(&uniform, &targets).unwrap().to_scalar::<f64>().unwrap();
    assert!((loss - L as f64 * ((L * K) as f64).ln()).abs() < 1e-12);

    let mut peaked = mask.repeat(2 * L);
    for (b, y) in targets.iter().enumerate() {
        for (l, &t) in y.iter().enumerate() {
            peaked[(b * L + l) * v + t as usize] = 60.0;
        }
    }
    let peaked = Tensor::from_vec(peaked, (2, L, v), &Device::Cpu).unwrap();
    assert!(rec_loss(&peaked, &targets).unwrap().to_scalar::<f64>().unwrap() < 1e-20);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw: Vec<f64> = (0..2 * L * v).map(|_| rng.random_range(-3.0..3.0)).collect();
    let logits = Tensor::from_vec(raw.clone(), (2, L, v), &Device::Cpu).unwrap();
    let got = rec_loss(&logits, &targets).unwrap().to_scalar::<f64>().unwrap();
    let mut oracle = 0.0;
    for (b, y) in targets.iter().enumerate() {
        for (l, &t) in y.iter().enumerate() {
            let row = &raw[(b * L + l) * v..(b * L + l + 1) * v];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            oracle -= row[t as usize] - lse;
        }
    }
    assert!((got - oracle / 2.0).abs() < 1e-6);
}

#[test]
fn ablations_match_their_definitions() {
    let ids = ids();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probe = model(Variant::DiscRec, 8);
    let enc = encoder_batch(&mut rng, &probe, &ids);
    let ctx = Ctx::eval();

    // no gate: fused = semantic + collaborative
    let sum = model(Variant::WoGating, 8);
    let e = sum.embed_tokens(&enc).unwrap();
    let out = sum.dual.as_ref().unwrap().forward(&e, &enc, &sum.vocab, Side::Encoder, &ctx).unwrap();
    let fused = rows(&out.fused);
    let summed = rows(&(out.semantic + out.collaborative).unwrap());
    for (r, &tok) in enc.iter().flatten().enumerate() {
        if tok != PAD {
            assert_eq!(fused[r], summed[r]);
        }
    }

    // Baseline is the full model with the module switched off
    let mut full = model(Variant::DiscRec, 8);
    let base = model(Variant::Baseline, 8);
    full.module_enabled = false;
    assert_eq!(values(&full.encode(&enc, &ctx).unwrap()), values(&base.encode(&enc, &ctx).unwrap()));
    let targets = vec![m_target(&base, &ids, "i1"), m_target(&base, &ids, "i2"), m_target(&base, &ids, "i3")];
    assert_eq!(
        values(&full.forward(&enc, &targets, &ctx).unwrap()),
        values(&base.forward(&enc, &targets, &ctx).unwrap())
    );
    full.module_enabled = true;
    assert_ne!(values(&full.encode(&enc, &ctx).unwrap()), values(&base.encode(&enc, &ctx).unwrap()));

    // WoIPE is the full model with V = 0
    let wo = model(Variant::WoIPE, 8);
    let n = full.store.values("ipe.table").unwrap().len();
    full.store.set("ipe.table", &vec![0.0; n]).unwrap();
    assert_eq!(values(&full.forward(&enc, &targets, &ctx).unwrap()), values(&wo.forward(&enc, &targets, &ctx).unwrap()));
}

fn m_target(m: &Recommender, ids: &IdMap, item: &str) -> Vec<u32> {
    m.vocab.tokenize_target(item, ids).unwrap()
}

#[test]
fn checkpoint_round_trip() {
    let ids = ids();
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let mut cfg = tiny(variant, 9);
        cfg.precision = Precision::F32;
        let m = build_variant(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = encoder_batch(&mut rng, &m, &ids);
        let targets = vec![m_target(&m, &ids, "i4"); 3];
        let path = dir.path().join(format!("{variant}.ckpt"));
        m.save(&path, serde_json::json!({"id_map": "abc"})).unwrap();
        let (back, meta) = Recommender::load(&path).unwrap();
        assert_eq!(meta["id_map"], "abc");
        assert_eq!(back.config, m.config);
        let ctx = Ctx::eval();
        assert_eq!(values(&m.forward(&enc, &targets, &ctx).unwrap()), values(&back.forward(&enc, &targets, &ctx).unwrap()));
    }
    let mut other = tiny(Variant::Baseline, 1);
    other.precision = Precision::F32;
    let bare = build_variant(&other).unwrap();
    let ck = model(Variant::DiscRec, 2).to_checkpoint(serde_json::Value::Null).unwrap();
    assert!(bare.store.load_checkpoint(&ck, true).is_err());
    assert_eq!(bare.load_matching(&ck).unwrap(), bare.store.names().count());
}

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|u| {
            let len = rng.random_range(1..5);
            let h = history(&mut rng, len);
            let target = format!("i{}", (h.len() * 3 + u) % 10);
            Sample { user: format!("u{u}"), history: h, target }
        })
        .collect()
}

#[test]
fn overfits_a_single_pair() {
    let ids = ids();
    let mut cfg = tiny(Variant::DiscRec, 11);
    cfg.precision = Precision::F32;
    let m = build_variant(&cfg).unwrap();
    let ex = make_examples(&m, &samples(1, 11), &ids).unwrap();
    let train = TrainConfig { epochs: 200, batch_size: 1, lr: 1e-2, weight_decay: 0.0, seed: 1, max_steps: 0 };
    let report = train_recommender(&m, &ex, &train, None).unwrap();
    let best = report.step_losses.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best < 0.01, "best loss {best}");
    assert!(evaluate_loss(&m, &ex, 1).unwrap() < 0.01);
}

#[test]
fn training_is_reproducible_and_logged() {
    let ids = ids();
    let run = || {
        let mut cfg = tiny(Variant::DiscRec, 12);
        cfg.precision = Precision::F32;
        cfg.backbone.dropout = 0.1;
        cfg.branch.dropout = 0.1;
        let m = build_variant(&cfg).unwrap();
        let ex = make_examples(&m, &samples(20, 12), &ids).unwrap();
        let mut log = Vec::new();
        let train = TrainConfig { epochs: 2, batch_size: 8, seed: 5, ..TrainConfig::default() };
        let r = train_recommender(&m, &ex, &train, Some(&mut log)).unwrap();
        (r, String::from_utf8(log).unwrap())
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    let lines: Vec<&str> = log_a.lines().collect();
    assert_eq!(lines[0], "epoch,step,loss,lr,seed");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,3,"));
    assert!(lines[2].ends_with(",0.001,5"));
}

#[test]
fn non_finite_loss_aborts_and_restores() {
    let ids = ids();
    let m = model(Variant::DiscRec, 13);
    let ex = make_examples(&m, &samples(4, 13), &ids).unwrap();
    let good = m.store.values("embed.table").unwrap();
    let mut bad = good.clone();
    bad[30] = f64::NAN;
    m.store.set("embed.table", &bad).unwrap();
    let train = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    let err = train_recommender(&m, &ex, &train, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    assert!(m.store.values("embed.table").unwrap()[30].is_nan());
    assert_eq!(m.store.values("embed.table").unwrap()[..30], good[..30]);
}

#[test]
fn gradients_match_finite_differences() {
    let ids = ids();
    for variant in [Variant::DiscRec, Variant::OneQuery, Variant::SelfGating, Variant::WithPE, Variant::WithIE, Variant::AllLayer] {
        let mut cfg = tiny(variant, 14);
        cfg.backbone.activation = Activation::Gelu;
        let m = build_variant(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let enc = vec![m.input_tokens(&history(&mut rng, 3), &ids).unwrap()];
        let targets = vec![m_target(&m, &ids, "i6")];
        let objective = || m.loss(&enc, &targets, &Ctx::eval()).unwrap();
        let grads = objective().backward().unwrap();
        let eval = || objective().to_scalar::<f64>().unwrap();
        let h = 1e-6;
        let names: Vec<String> = m.store.names().map(String::from).collect();
        for name in names {
            let var = m.store.get(&name).unwrap();
            let ag = match grads.get(var.as_tensor()) {
                Some(g) => values(g),
                None => vec![0.0; var.elem_count()],
            };
            let base = m.store.values(&name).unwrap();
            let picks: Vec<usize> = if base.len() <= 48 {
                (0..base.len()).collect()
            } else {
                (0..48).map(|_| rng.random_range(0..base.len())).collect()
            };
            let mut fd = Vec::new();
            for &i in &picks {
                let mut p = base.clone();
                p[i] += h;
                m.store.set(&name, &p).unwrap();
                let up = eval();
                p[i] -= 2.0 * h;
                m.store.set(&name, &p).unwrap();
                fd.push((up - eval()) / (2.0 * h));
            }
            m.store.set(&name, &base).unwrap();
            let ag: Vec<f64> = picks.iter().map(|&i| ag[i]).collect();
            let diff: f64 = ag.iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
            let scale = ag.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|f| f * f).sum::<f64>().sqrt());
            if scale < 1e-7 {
                continue;
            }
            assert!(diff / scale < 1e-3, "{variant} {name}: relative error {}", diff / scale);
        }
    }
}
