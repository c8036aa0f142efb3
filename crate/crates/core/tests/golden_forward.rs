//! Byte-stable forward passes. Set `CONDTOK_BLESS=1` to rewrite the
//! fixtures after an intentional numerical change.

use std::path::PathBuf;

use condtok::attention::{AttentionKind, Model, ModelConfig};
use condtok::conditioning::CorrectionSpec;
use condtok::matrix_io::{format_matrix_csv, parse_matrix_csv};
use condtok::rng::Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check(name: &str, config: ModelConfig) {
    let model = Model::init(&config, 2024).unwrap();
    let tokens = Rng::stream(2024, "golden/tokens").normal_matrix(config.seq_len, config.token_dim, 1.0);
    let correction = config
        .correction
        .map(|s| s.build(&model.embed(&tokens, None).unwrap()).unwrap());
    let out = model.forward(&model.embed(&tokens, correction.as_ref()).unwrap()).unwrap();
    let text = format_matrix_csv(&out);
    let path = fixture(name);
    if std::env::var_os("CONDTOK_BLESS").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, expected, "forward output drifted from {}", path.display());
    let parsed = parse_matrix_csv(&expected).unwrap();
    assert_eq!(parsed.to_bits(), out.to_bits());
}

fn small(attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        seq_len: 4,
        token_dim: 3,
        embed_dim: 4,
        heads: 2,
        layers: 2,
        attention,
        ..ModelConfig::default()
    }
}

#[test]
fn softmax_forward_is_golden() {
    check("forward_softmax_n4_d4_h2.csv", small(AttentionKind::Softmax));
}

#[test]
fn linear_forward_with_layer_norm_is_golden() {
    check(
        "forward_linear_ln_n4_d4_h2.csv",
        ModelConfig {
            layer_norm: true,
            ..small(AttentionKind::Linear)
        },
    );
}

#[test]
fn corrected_forward_is_golden() {
    check(
        "forward_softmax_lambda10_n4_d4_h2.csv",
        ModelConfig {
            correction: Some(CorrectionSpec::identity_scaled(10.0).unwrap()),
            ..small(AttentionKind::Softmax)
        },
    );
}
