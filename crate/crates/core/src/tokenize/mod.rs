//! Trajectory discretization: fixed-bin κ–a and x–y–yaw grids, DCT
//! coefficient quantization, token packing, the unified vocabulary and
//! reconstruction benchmarks.

pub mod bench;
pub mod codec;
pub mod dct;
pub mod grid;
pub mod vocab;

pub use bench::{recon_benchmark, BenchReport};
pub use codec::{
    ka_detokenize, ka_points_to_tokens, ka_tokenize, token_to_ka, DctCodec, FbKaCodec, FbXyCodec,
    IdentityCodec, TrajCodec,
};
pub use dct::{dct_dequantize, dct_forward, dct_inverse, dct_quantize, DctConfig, DctSpace};
pub use grid::{pack_token, unpack_token, KaGridConfig, TrajTokenId, UniformGrid, XyGridConfig};
pub use vocab::{Modality, VocabLayout};

use crate::error::{DapError, Result};

/// A named trajectory discretization scheme.
#[derive(Clone, Debug, PartialEq)]
pub enum Scheme {
    Identity,
    FbKa(KaGridConfig),
    FbXy(XyGridConfig),
    Dct(DctConfig),
}

impl Scheme {
    /// Parses names such as `FB-ka-B`, `FB-xy-A`, `DCT-xy-B`, `DCT-ka-C`, `identity`.
    pub fn from_name(name: &str) -> Result<(Scheme, String)> {
        let unknown = || DapError::Usage(format!("unknown tokenizer scheme '{name}'"));
        if name.eq_ignore_ascii_case("identity") {
            return Ok((Scheme::Identity, "-".into()));
        }
        let (family, cfg) = name.rsplit_once('-').ok_or_else(unknown)?;
        let scheme = match family.to_ascii_lowercase().as_str() {
            "fb-ka" => Scheme::FbKa(KaGridConfig::preset(cfg).ok_or_else(unknown)?),
            "fb-xy" => Scheme::FbXy(XyGridConfig::preset(cfg).ok_or_else(unknown)?),
            "dct-xy" => Scheme::Dct(match cfg {
                "A" | "a" => DctConfig::dct_xy_a(),
                "B" | "b" => DctConfig::dct_xy_b(),
                _ => return Err(unknown()),
            }),
            "dct-ka" => Scheme::Dct(match cfg {
                "C" | "c" => DctConfig::dct_ka_c(),
                "D" | "d" => DctConfig::dct_ka_d(),
                _ => return Err(unknown()),
            }),
            _ => return Err(unknown()),
        };
        Ok((scheme, cfg.to_ascii_uppercase()))
    }

    pub fn codebook_size(&self) -> usize {
        match self {
            Scheme::Identity => 0,
            Scheme::FbKa(c) => c.codebook_size(),
            Scheme::FbXy(c) => c.codebook_size(),
            Scheme::Dct(c) => c.codebook_size(),
        }
    }

    pub fn codec(&self) -> Box<dyn TrajCodec> {
        match self {
            Scheme::Identity => Box::new(IdentityCodec),
            Scheme::FbKa(c) => Box::new(FbKaCodec(*c)),
            Scheme::FbXy(c) => Box::new(FbXyCodec(*c)),
            Scheme::Dct(c) => Box::new(DctCodec(c.clone())),
        }
    }
}

/// Every scheme from the fixed-bin / DCT comparison, in table order.
pub const ALL_SCHEMES: [&str; 12] = [
    "FB-ka-A", "FB-ka-B", "FB-ka-C", "FB-ka-D", "FB-xy-A", "FB-xy-B", "FB-xy-C", "FB-xy-D",
    "DCT-xy-A", "DCT-xy-B", "DCT-ka-C", "DCT-ka-D",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_resolve_to_table_sizes() {
        let expected = [
            1144, 3648, 4576, 14592, 45056, 278784, 360448, 2230272, 256000, 720000, 6400, 25600,
        ];
        for (name, size) in ALL_SCHEMES.iter().zip(expected) {
            let (s, _) = Scheme::from_name(name).unwrap();
            assert_eq!(s.codebook_size(), size, "{name}");
        }
        assert!(matches!(
            Scheme::from_name("FB-zz-A"),
            Err(DapError::Usage(_))
        ));
        assert!(matches!(
            Scheme::from_name("DCT-xy-C"),
            Err(DapError::Usage(_))
        ));
    }
}
