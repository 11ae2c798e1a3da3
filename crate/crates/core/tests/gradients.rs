//! Finite-difference checks for every tape op and for whole models.

use idcnn_core::config::{EncoderKind, LossBlocks, TrainMode};
use idcnn_core::data::{LabelScheme, Vocabulary};
use idcnn_core::gradcheck::{check_inputs, check_params, Mismatch};
use idcnn_core::params::ParamStore;
use idcnn_core::train::sequence_loss;
use idcnn_core::{Config, Model, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so that ReLU kinks are never crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random weighted sum, so every output entry gets a distinct upstream gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> idcnn_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.value(x).shape().to_vec();
    let w = tape.input(random(&shape, &mut rng));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn assert_ok(name: &str, seed: u64, m: Mismatch) {
    assert!(m.max_rel_error < TOL, "{name} seed {seed}: {m:?}");
}

fn each_seed(name: &str, f: impl Fn(u64, &mut ChaCha8Rng) -> Mismatch) {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert_ok(name, seed, f(seed, &mut rng));
    }
}

#[test]
fn affine() {
    each_seed("affine", |s, rng| {
        let ins = [random(&[3, 4], rng), random(&[2, 4], rng), random(&[2], rng)];
        check_inputs(&ins, EPS, |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            project(t, y, s)
        })
        .unwrap()
    });
    // A rank-1 input is a single row.
    each_seed("affine vector", |s, rng| {
        let ins = [random(&[4], rng), random(&[3, 4], rng), random(&[3], rng)];
        check_inputs(&ins, EPS, |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            project(t, y, s)
        })
        .unwrap()
    });
}

#[test]
fn elementwise() {
    type Unary = fn(&mut Tape, Var) -> Var;
    let ops: [(&str, Unary); 5] = [
        ("relu", |t, x| t.relu(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("exp", |t, x| t.exp(x)),
        ("scale", |t, x| t.scale(x, -2.5)),
    ];
    for (name, op) in ops {
        each_seed(name, |s, rng| {
            check_inputs(&[away_from_zero(&[3, 5], rng)], EPS, |t, v| {
                let y = op(t, v[0]);
                project(t, y, s)
            })
            .unwrap()
        });
    }
}

#[test]
fn binary() {
    type Binary = fn(&mut Tape, Var, Var) -> idcnn_core::Result<Var>;
    let ops: [(&str, Binary); 3] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ];
    for (name, op) in ops {
        each_seed(name, |s, rng| {
            check_inputs(&[random(&[2, 3], rng), random(&[2, 3], rng)], EPS, |t, v| {
                let y = op(t, v[0], v[1])?;
                project(t, y, s)
            })
            .unwrap()
        });
    }
    // The same variable on both sides accumulates twice.
    each_seed("mul self", |s, rng| {
        check_inputs(&[random(&[4], rng)], EPS, |t, v| {
            let y = t.mul(v[0], v[0])?;
            project(t, y, s)
        })
        .unwrap()
    });
}

#[test]
fn mask() {
    each_seed("mask", |s, rng| {
        let m = Tensor::matrix(2, 2, vec![0.0, 2.0, 1.5, 0.0]).unwrap();
        check_inputs(&[random(&[2, 2], rng)], EPS, |t, v| {
            let y = t.mask(v[0], &m)?;
            project(t, y, s)
        })
        .unwrap()
    });
}

#[test]
fn shape_ops() {
    each_seed("concat", |s, rng| {
        check_inputs(&[random(&[3, 2], rng), random(&[3, 4], rng)], EPS, |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            project(t, y, s)
        })
        .unwrap()
    });
    each_seed("concat vectors", |s, rng| {
        check_inputs(&[random(&[2], rng), random(&[3], rng)], EPS, |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]])?;
            project(t, y, s)
        })
        .unwrap()
    });
    each_seed("slice_cols", |s, rng| {
        check_inputs(&[random(&[3, 6], rng)], EPS, |t, v| {
            let y = t.slice_cols(v[0], 2, 3)?;
            project(t, y, s)
        })
        .unwrap()
    });
    each_seed("row and stack_rows", |s, rng| {
        check_inputs(&[random(&[4, 3], rng)], EPS, |t, v| {
            let r2 = t.row(v[0], 2)?;
            let r0 = t.row(v[0], 0)?;
            let y = t.stack_rows(&[r2, r0, r2])?;
            project(t, y, s)
        })
        .unwrap()
    });
    each_seed("gather", |s, rng| {
        check_inputs(&[random(&[5, 3], rng)], EPS, |t, v| {
            let y = t.gather(v[0], &[4, 1, 4, 0])?;
            project(t, y, s)
        })
        .unwrap()
    });
}

#[test]
fn reductions() {
    each_seed("log_softmax", |s, rng| {
        check_inputs(&[random(&[3, 5], rng)], EPS, |t, v| {
            let y = t.log_softmax(v[0]);
            project(t, y, s)
        })
        .unwrap()
    });
    each_seed("sum", |_, rng| {
        check_inputs(&[random(&[3, 5], rng)], EPS, |t, v| Ok(t.sum(v[0]))).unwrap()
    });
    each_seed("pick_sum", |_, rng| {
        check_inputs(&[random(&[3, 4], rng)], EPS, |t, v| {
            t.pick_sum(v[0], &[(0, 3), (2, 1), (0, 3)])
        })
        .unwrap()
    });
}

#[test]
fn dilated_conv() {
    for (radius, dilation) in [(1, 1), (1, 2), (2, 3), (1, 8), (0, 1)] {
        each_seed("dilated_conv", |s, rng| {
            let w = 2 * radius + 1;
            let ins = [random(&[6, 3], rng), random(&[2, w * 3], rng), random(&[2], rng)];
            check_inputs(&ins, EPS, |t, v| {
                let y = t.dilated_conv(v[0], v[1], v[2], radius, dilation)?;
                project(t, y, s)
            })
            .unwrap()
        });
    }
}

#[test]
fn crf_nll() {
    let scheme = LabelScheme::from_types(["A"]);
    let constraints = scheme.bilou_constraints();
    each_seed("crf_nll", |_, rng| {
        let d = 4;
        let t_len = rng.random_range(1..6);
        let gold: Vec<usize> = (0..t_len).map(|_| rng.random_range(0..d)).collect();
        let ins = [
            random(&[t_len, d], rng),
            random(&[d, d], rng),
            random(&[d], rng),
            random(&[d], rng),
        ];
        check_inputs(&ins, EPS, |t, v| t.crf_nll(v[0], v[1], Some((v[2], v[3])), None, &gold)).unwrap()
    });
    each_seed("crf_nll no boundaries", |_, rng| {
        let gold = [0, 2, 1];
        let ins = [random(&[3, 3], rng), random(&[3, 3], rng)];
        check_inputs(&ins, EPS, |t, v| t.crf_nll(v[0], v[1], None, None, &gold)).unwrap()
    });
    each_seed("crf_nll constrained", |_, rng| {
        // O B-A L-A U-A is allowed by the BILOU grammar.
        let gold = [0, 1, 3, 4];
        let d = scheme.len();
        let ins = [
            random(&[4, d], rng),
            random(&[d, d], rng),
            random(&[d], rng),
            random(&[d], rng),
        ];
        check_inputs(&ins, EPS, |t, v| {
            t.crf_nll(v[0], v[1], Some((v[2], v[3])), Some(&constraints), &gold)
        })
        .unwrap()
    });
}

#[test]
fn parameter_gradients_match_leaf_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&[2, 3], &mut rng)).unwrap();
    let b = store.add("b", random(&[2], &mut rng)).unwrap();
    let x = random(&[4, 3], &mut rng);
    let m = check_params(&store, EPS, |t| {
        let xv = t.input(x.clone());
        let (wv, bv) = (t.param(w), t.param(b));
        // The same parameter used twice accumulates both uses.
        let h = t.affine(xv, wv, bv)?;
        let h2 = t.affine(xv, wv, bv)?;
        let y = t.mul(h, h2)?;
        project(t, y, 9)
    })
    .unwrap();
    assert_ok("params", 3, m);
}

fn small_model(seed: u64, edit: impl Fn(&mut Config)) -> Model {
    let mut c = Config::default();
    c.model.word_dim = 3;
    c.model.shape_dim = 2;
    c.model.hidden = 4;
    c.model.layers = 2;
    c.model.blocks = 2;
    c.model.block_init = idcnn_core::config::BlockInit::Xavier;
    edit(&mut c);
    let vocab = Vocabulary::from_words(["a", "b", "c"]);
    let labels = LabelScheme::from_types(["X"]);
    let mut m = Model::new(c, vocab, labels, seed).unwrap();
    // Zero biases put ReLU inputs exactly on the kink (a dead row is exactly
    // the bias), where central differences straddle the corner.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for t in m.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    m
}

/// Gradient of the full training objective with the dropout masks held
/// fixed: each evaluation reseeds the dropout stream identically.
fn check_model(model: &Model, seed: u64) -> Mismatch {
    let ids = [2, 3, 4, 2, 1];
    let shapes = [1, 0, 2, 1, 4];
    let gold = [0, 1, 3, 0, 4];
    check_params(&model.params, EPS, |tape| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = sequence_loss(model, tape, &ids, &shapes, &gold, &model.config, Some(&mut rng))?;
        Ok(loss.expect("unmasked"))
    })
    .unwrap()
}

#[test]
fn end_to_end_idcnn_with_el_penalty() {
    for seed in 0..20 {
        let model = small_model(seed, |c| {
            c.train.mode = TrainMode::GreedyIterated;
            c.train.loss_blocks = LossBlocks::All;
            c.train.input_dropout = 0.2;
            c.train.block_dropout = 0.3;
            c.train.el_lambda = 0.7;
        });
        assert_ok("idcnn", seed, check_model(&model, seed));
    }
}

#[test]
fn end_to_end_noshare_crf_and_lstm() {
    for seed in 0..5 {
        let noshare = small_model(seed, |c| c.model.share_blocks = false);
        assert_ok("noshare", seed, check_model(&noshare, seed));
        let crf = small_model(seed, |c| {
            c.set("mode", "crf").unwrap();
            c.train.loss_blocks = LossBlocks::Last;
            c.model.crf_constrained = true;
        });
        assert_ok("crf", seed, check_model(&crf, seed));
        let lstm = small_model(seed, |c| {
            c.model.encoder = EncoderKind::BiLstm;
            c.model.lstm_hidden = 3;
            c.train.mode = TrainMode::Greedy;
            c.train.loss_blocks = LossBlocks::Last;
            c.train.block_dropout = 0.2;
            c.train.el_lambda = 0.5;
        });
        assert_ok("lstm", seed, check_model(&lstm, seed));
    }
}
