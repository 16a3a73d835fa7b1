use cmn_cli::checkpoint::{decode, encode, flatten, CHECKPOINT_VERSION};
use cmn_cli::CliError;
use cmn_core::model::Phase;
use cmn_core::tasks::{gen_synthetic_tasks, Which};
use cmn_core::trainer::train_short_phase;
use cmn_core::*;
use std::path::Path;

/// A state caught mid-consolidation: long, short, snapshot and cells all live.
fn busy_state<T: Scalar>(embedding: GateEmbedding, strategy: TransferStrategy) -> CmnState<T> {
    let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 5, 6.0, 4), 2).unwrap();
    let mut model = ModelConfig::new(NetworkSpec::tiny_mlp(5, 6, 1));
    model.embedding = embedding;
    model.strategy = strategy;
    let opt = OptimizerConfig { epochs: 2, ..OptimizerConfig::short_default() };
    let mut state = CmnState::<T>::new(model).unwrap();
    let mut log = TrainLog::default();
    state.begin_task(2, 9).unwrap();
    train_short_phase(&mut state, &seq.tasks[0], &opt, 9, false, &mut log).unwrap();
    state.promote_first_task().unwrap();
    state.begin_task(2, 9).unwrap();
    train_short_phase(&mut state, &seq.tasks[1], &opt, 9, false, &mut log).unwrap();
    state.expand_long_head(9).unwrap();
    state
}

fn round_trip<T: Scalar>(state: &CmnState<T>) -> CmnState<T> {
    let bytes = encode(state, Some("abc".into()), Some(9)).unwrap();
    let (manifest, back) = decode::<T>(Path::new("mem"), &bytes).unwrap();
    assert_eq!(manifest.schema_version, CHECKPOINT_VERSION);
    assert_eq!(manifest.dtype, T::DTYPE);
    back
}

#[test]
fn every_tensor_survives_bit_for_bit() {
    for embedding in [GateEmbedding::Full, GateEmbedding::Diagonal] {
        for strategy in TransferStrategy::ALL {
            let state = busy_state::<f64>(embedding, strategy);
            let back = round_trip(&state);
            assert_eq!(back.phase, Phase::Consolidating);
            assert_eq!(back.task_index, 2);
            assert_eq!(back.class_offsets, state.class_offsets);
            assert_eq!(back.links, state.links);
            let (a, b) = (flatten(&state), flatten(&back));
            assert_eq!(a.len(), b.len());
            for ((na, sa, da), (nb, sb, db)) in a.iter().zip(&b) {
                assert_eq!((na, sa), (nb, sb));
                assert!(da.iter().zip(db).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
            }
        }
    }
    let single = busy_state::<f32>(GateEmbedding::Full, TransferStrategy::Cell);
    let back = round_trip(&single);
    assert_eq!(flatten(&single), flatten(&back));
}

#[test]
fn restored_states_compute_the_same_outputs() {
    let state = busy_state::<f64>(GateEmbedding::Full, TransferStrategy::Cell);
    let back = round_trip(&state);
    let seq = gen_synthetic_tasks(&SyntheticSpec::blobs(2, 5, 6.0, 4), 2).unwrap();
    let (x, _) = seq.tasks[1].all::<f64>(Which::Test).unwrap();
    assert_eq!(state.forward_short(&x).unwrap(), back.forward_short(&x).unwrap());
    assert_eq!(state.long_net().unwrap().logits(&x).unwrap(), back.long_net().unwrap().logits(&x).unwrap());
}

#[test]
fn wrong_dtype_and_damage_are_errors() {
    let state = busy_state::<f64>(GateEmbedding::Full, TransferStrategy::Cell);
    let bytes = encode(&state, None, None).unwrap();
    let err = decode::<f32>(Path::new("x"), &bytes).unwrap_err();
    assert!(matches!(err, CliError::Integrity { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);

    assert!(matches!(decode::<f64>(Path::new("x"), b"CMNCKPT"), Err(CliError::Integrity { .. })));
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(decode::<f64>(Path::new("x"), &wrong_magic), Err(CliError::Integrity { .. })));

    // A manifest whose tensor list disagrees with its own structure.
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    let renamed = manifest.replacen("long.head.bias", "long.head.bian", 1);
    let mut patched = bytes[..8].to_vec();
    patched.extend_from_slice(&(renamed.len() as u32).to_le_bytes());
    patched.extend_from_slice(renamed.as_bytes());
    patched.extend_from_slice(&bytes[12 + len..]);
    let err = decode::<f64>(Path::new("x"), &patched).unwrap_err();
    assert!(err.to_string().contains("long.head.bian"), "{err}");
}
