use proptest::prelude::*;
use uniattn_cli::checkpoint::{Checkpoint, Container, MAGIC};
use uniattn_core::model::{Model, ModelConfig, VariantSpec};
use uniattn_core::uniattn::{CompensationSet, SuperblockPlan};
use uniattn_core::RngStream;

fn bits(c: &Checkpoint) -> Vec<(String, Vec<u64>)> {
    c.to_container().tensors.iter().map(|(n, m)| (n.clone(), m.data().iter().map(|v| v.to_bits()).collect())).collect()
}

fn sample(layers: usize, heads: usize, d_head: usize, vocab: usize, seed: u64, uni: bool) -> Checkpoint {
    let mut cfg = ModelConfig::toy(layers, heads * d_head, vocab);
    cfg.n_heads = heads;
    cfg.n_kv_heads = heads;
    cfg.d_head = d_head;
    let mut rng = RngStream::new(seed);
    let mut m = Model::init(cfg, &mut rng).unwrap();
    if uni && layers >= 2 {
        let spec = VariantSpec::UniAttn { plan: SuperblockPlan::new(vec![(1, layers)]).unwrap(), compensated: true };
        let mut comp = CompensationSet::zeros(&m.config.with_variant(spec.clone()));
        for (_, w) in comp.entries_mut() {
            *w = rng.gaussian_matrix(w.rows(), w.cols());
        }
        m = m.with_variant(spec, Some(comp)).unwrap();
    }
    // Awkward values must survive too.
    m.weights.embed.data_mut()[0] = -0.0;
    m.weights.embed.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
    Checkpoint { config: m.config, weights: m.weights, compensation: m.compensation }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn round_trip_is_bit_exact(
        layers in 1usize..4, heads in 1usize..3, d_head in prop::sample::select(vec![2usize, 4, 6]), vocab in 2usize..9,
        seed in any::<u64>(), uni in any::<bool>(),
    ) {
        let ck = sample(layers, heads, d_head, vocab, seed, uni);
        let bytes = ck.to_container().to_bytes();
        let back = Checkpoint::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(bits(&back), bits(&ck));
        prop_assert_eq!(&back.config, &ck.config);
        prop_assert_eq!(back.to_container().to_bytes(), bytes);
    }
}

#[test]
fn header_layout() {
    let ck = sample(2, 2, 2, 5, 1, true);
    let bytes = ck.to_container().to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(&bytes[20..20 + meta_len]).unwrap();
    let tensors = meta["tensors"].as_array().unwrap();
    let mut offset = 0;
    for t in tensors {
        assert_eq!(t["byte_offset"].as_u64().unwrap(), offset);
        offset += t["rows"].as_u64().unwrap() * t["cols"].as_u64().unwrap() * 8;
    }
    assert_eq!(bytes.len() - 20 - meta_len, offset as usize);
    assert_eq!(tensors[0]["name"], "embed");
    assert_eq!(tensors.last().unwrap()["name"], "wc.2");
    // First payload value is embed[0][0] = -0.0.
    let first = f64::from_le_bytes(bytes[20 + meta_len..28 + meta_len].try_into().unwrap());
    assert_eq!(first.to_bits(), (-0.0f64).to_bits());
}

#[test]
fn damaged_containers_are_rejected() {
    let bytes = sample(1, 1, 2, 3, 2, false).to_container().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Container::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[8] = 2;
    assert!(Container::from_bytes(&bad).unwrap_err().contains("version"));
    assert!(Container::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(Container::from_bytes(&long).is_err());

    let mut c = Container::from_bytes(&bytes).unwrap();
    c.tensors.pop();
    assert!(Checkpoint::from_container(c).unwrap_err().contains("missing"));
}
