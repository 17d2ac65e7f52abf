//! Shared fixtures for the criterion benchmarks.

use tiedlab_core::ops::ConvSpec;
use tiedlab_core::tensor::Tensor4;
use tiedlab_core::tied::TiedConvWeights;
use tiedlab_core::Rng;

/// A ready-to-run tied convolution instance: 3×3 kernel, pad 1, stride 1,
/// `c` channels in and out, `blocks` tied blocks.
pub struct TbcFixture {
    pub spec: ConvSpec,
    pub weights: TiedConvWeights,
    pub input: Tensor4,
}

pub fn tbc_fixture(c: usize, hw: usize, blocks: usize, seed: u64) -> TbcFixture {
    let spec = ConvSpec::tied(c, c, 3, 1, 1, blocks, false);
    let mut rng = Rng::seeded(seed);
    let input = Tensor4::random(1, c, hw, hw, 1.0, &mut rng);
    let weights = TiedConvWeights::init(&spec, &mut rng).expect("legal spec");
    TbcFixture {
        spec,
        weights,
        input,
    }
}
