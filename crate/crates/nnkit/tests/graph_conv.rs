use nnkit::{graph_conv_forward, seeded_rng, GraphConv, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn set_identity_weights(store: &mut ParamStore, layer: &GraphConv) {
    let (outw, inw) = (layer.out_width(), layer.in_width());
    let w = store.get_mut(layer.weight);
    w.fill(0.0);
    for e in 0..layer.edges().len() {
        for k in 0..outw.min(inw) {
            w.data_mut()[e * outw * inw + k * inw + k] = 1.0;
        }
    }
    store.get_mut(layer.bias).fill(0.0);
}

#[test]
fn single_node_identity_filter_is_identity() {
    let mut rng = seeded_rng(0);
    let mut store = ParamStore::new();
    let layer = GraphConv::new(&mut store, "c", 1, &[], 3, 3, &mut rng).unwrap();
    assert_eq!(layer.edges(), &[(0, 0)]);
    set_identity_weights(&mut store, &layer);
    let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
    assert_eq!(graph_conv_forward(&layer, &store, &x).unwrap(), x);
}

#[test]
fn fully_connected_pair_sums_inputs() {
    let mut rng = seeded_rng(0);
    let mut store = ParamStore::new();
    let layer = GraphConv::new(&mut store, "c", 2, &[(0, 1), (1, 0)], 2, 2, &mut rng).unwrap();
    set_identity_weights(&mut store, &layer);
    let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
    let y = graph_conv_forward(&layer, &store, &x).unwrap();
    assert_eq!(y.data(), &[11.0, 22.0, 11.0, 22.0]);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut rng = seeded_rng(0);
    let mut store = ParamStore::new();
    let layer = GraphConv::new(&mut store, "c", 2, &[], 2, 2, &mut rng).unwrap();
    let x = Tensor::zeros(&[1, 3]);
    assert!(graph_conv_forward(&layer, &store, &x).is_err());
}

#[test]
fn parameter_count_follows_edges_and_nodes() {
    let mut rng = seeded_rng(0);
    let mut store = ParamStore::new();
    let layer = GraphConv::new(&mut store, "c", 3, &[(0, 1), (1, 0), (2, 1)], 4, 5, &mut rng).unwrap();
    assert_eq!(layer.edges().len(), 6);
    assert_eq!(store.num_scalars(), 6 * 5 * 4 + 3 * 5);
}

/// Independent triple loop: out[b, i, o] = b_i[o] + Σ_{(i,j)} Σ_k W_e[o, k]·x[b, j, k].
fn brute_force(layer: &GraphConv, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let (n, inw, outw) = (layer.n_nodes(), layer.in_width(), layer.out_width());
    let w = store.get(layer.weight).data();
    let bias = store.get(layer.bias).data();
    let rows = x.rows();
    let mut out = vec![0.0; rows * n * outw];
    for r in 0..rows {
        for i in 0..n {
            for o in 0..outw {
                let mut acc = bias[i * outw + o];
                for (e, &(dst, src)) in layer.edges().iter().enumerate() {
                    if dst != i {
                        continue;
                    }
                    for k in 0..inw {
                        acc += w[e * outw * inw + o * inw + k] * x.get2(r, src * inw + k);
                    }
                }
                out[r * n * outw + i * outw + o] = acc;
            }
        }
    }
    out
}

fn random_layer(seed: u64) -> (ParamStore, GraphConv, Tensor) {
    let mut rng = seeded_rng(seed);
    let n = rng.gen_range(1..7);
    let edges: Vec<(usize, usize)> = (0..3 * n).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    let (inw, outw, rows) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let mut store = ParamStore::new();
    let layer = GraphConv::new(&mut store, "c", n, &edges, inw, outw, &mut rng).unwrap();
    let b = store.get_mut(layer.bias);
    for v in b.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let x = Tensor::from_vec(
        &[rows, n * inw],
        (0..rows * n * inw).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    (store, layer, x)
}

#[test]
fn random_graphs_match_brute_force() {
    for seed in 0..25 {
        let (store, layer, x) = random_layer(seed);
        let fast = graph_conv_forward(&layer, &store, &x).unwrap();
        let slow = brute_force(&layer, &store, &x);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

proptest! {
    #[test]
    fn zero_bias_conv_is_linear(seed in 0u64..500, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let (mut store, layer, x) = random_layer(seed);
        store.get_mut(layer.bias).fill(0.0);
        let mut rng = seeded_rng(seed ^ 0xabc);
        let y = Tensor::from_vec(x.shape(), (0..x.len()).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let combo = Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        let fx = graph_conv_forward(&layer, &store, &x).unwrap();
        let fy = graph_conv_forward(&layer, &store, &y).unwrap();
        let fc = graph_conv_forward(&layer, &store, &combo).unwrap();
        for k in 0..fc.len() {
            let expected = alpha * fx.data()[k] + beta * fy.data()[k];
            prop_assert!((fc.data()[k] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn relabeling_nodes_permutes_outputs(seed in 0u64..500) {
        let (store, layer, x) = random_layer(seed);
        let (n, inw, outw) = (layer.n_nodes(), layer.in_width(), layer.out_width());
        let mut rng = seeded_rng(seed + 7);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        // Relabeled layer: node i becomes perm[i]; weights follow their edge.
        let edges: Vec<(usize, usize)> = layer.edges().iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let mut store2 = ParamStore::new();
        let layer2 = GraphConv::new(&mut store2, "c", n, &edges, inw, outw, &mut rng).unwrap();
        let w_old = store.get(layer.weight).data();
        let block = outw * inw;
        for (e, &(i, j)) in layer.edges().iter().enumerate() {
            let e2 = layer2.edges().iter().position(|&p| p == (perm[i], perm[j])).unwrap();
            store2.get_mut(layer2.weight).data_mut()[e2 * block..(e2 + 1) * block]
                .copy_from_slice(&w_old[e * block..(e + 1) * block]);
        }
        for i in 0..n {
            let src = store.get(layer.bias).data()[i * outw..(i + 1) * outw].to_vec();
            store2.get_mut(layer2.bias).data_mut()[perm[i] * outw..(perm[i] + 1) * outw].copy_from_slice(&src);
        }
        let rows = x.rows();
        let mut x2 = Tensor::zeros(x.shape());
        for r in 0..rows {
            for i in 0..n {
                for k in 0..inw {
                    x2.data_mut()[r * n * inw + perm[i] * inw + k] = x.get2(r, i * inw + k);
                }
            }
        }
        let y = graph_conv_forward(&layer, &store, &x).unwrap();
        let y2 = graph_conv_forward(&layer2, &store2, &x2).unwrap();
        for r in 0..rows {
            for i in 0..n {
                for o in 0..outw {
                    let a = y.get2(r, i * outw + o);
                    let b = y2.get2(r, perm[i] * outw + o);
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn parameter_file_round_trips() {
    let (store, _, _) = random_layer(3);
    let dir = std::env::temp_dir().join(format!("nnkit-params-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("p.json");
    store.save_json(&path).unwrap();
    let mut other = store.clone();
    other.zero_all();
    other.load_json(&path).unwrap();
    assert_eq!(other, store);

    let mut wrong = ParamStore::new();
    wrong.add("other", Tensor::zeros(&[1]));
    assert!(wrong.load_json(&path).is_err());
    std::fs::remove_dir_all(&dir).ok();
}
