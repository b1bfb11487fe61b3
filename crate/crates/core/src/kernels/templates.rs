//! The shader corpus, embedded at build time from `shaders/`.

use crate::shaderpp::{TemplateResolver, TemplateSource};

macro_rules! corpus {
    ($($path:literal),* $(,)?) => {
        &[$(($path, include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/shaders/", $path)))),*]
    };
}

pub static TEMPLATES: &[(&str, &str)] = corpus![
    "matmul_reg_tile.wgsl",
    "matvec.wgsl",
    "flash_decode.wgsl",
    "flash_reduce.wgsl",
    "flash_tile.wgsl",
    "elementwise.wgsl",
    "rms_norm.wgsl",
    "rope.wgsl",
    "softmax_row.wgsl",
    "quantize_kv_q8_0.wgsl",
    "common/entry.wgsl",
    "common/reduce.wgsl",
    "dequant/access.wgsl",
    "dequant/select.wgsl",
    "dequant/f32.wgsl",
    "dequant/f16.wgsl",
    "dequant/q8_0.wgsl",
    "dequant/q4_0.wgsl",
    "dequant/q4_1.wgsl",
    "dequant/q5_0.wgsl",
    "dequant/q5_1.wgsl",
    "dequant/q2_k.wgsl",
    "dequant/q4_k.wgsl",
    "dequant/q6_k.wgsl",
    "dequant/q1_0.wgsl",
    "dequant/iq4_nl.wgsl",
];

/// Resolver over the embedded corpus.
#[derive(Debug, Clone, Copy, Default)]
pub struct Embedded;

impl TemplateResolver for Embedded {
    fn resolve(&self, path: &str) -> Option<TemplateSource> {
        TEMPLATES.resolve(path)
    }
}

pub fn template(path: &str) -> TemplateSource {
    Embedded
        .resolve(path)
        .unwrap_or_else(|| panic!("template `{path}` is not in the corpus"))
}
