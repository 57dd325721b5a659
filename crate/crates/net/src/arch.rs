//! Architecture description, layer inventory and parameter arithmetic.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NetError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub enc_widths: [usize; 3],
    pub bottleneck: usize,
    /// Dropout after the second conv of the deepest encoder level.
    pub dropout_enc3: f64,
    /// Dropout after the second bottleneck conv.
    pub dropout_bottleneck: f64,
    pub conv_kernel: usize,
    pub up_kernel: usize,
    pub pool_size: usize,
    pub out_kernel: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            enc_widths: [32, 64, 128],
            bottleneck: 256,
            dropout_enc3: 0.5,
            dropout_bottleneck: 0.5,
            conv_kernel: 3,
            up_kernel: 2,
            pool_size: 2,
            out_kernel: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// 3×3, stride 1, zero padding 1.
    Conv3,
    /// 2×2 transposed convolution, stride 2.
    Up2,
    /// 1×1 output projection.
    Out1,
}

impl LayerKind {
    pub fn kernel(self) -> usize {
        match self {
            LayerKind::Conv3 => 3,
            LayerKind::Up2 => 2,
            LayerKind::Out1 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub name: &'static str,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        let k = self.kind.kernel();
        k * k * self.c_in * self.c_out
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.c_out
    }
}

/// Stable layer names, in execution order.
pub const LAYER_NAMES: [&str; 16] = [
    "enc1a", "enc1b", "enc2a", "enc2b", "enc3a", "enc3b", "bott_a", "bott_b", "up3", "dec3", "up2", "dec2", "up1", "dec1",
    "penult", "output",
];

/// One step of the network graph, for introspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Conv(&'static str),
    Pool,
    Upsample(&'static str),
    Merge,
    Dropout,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub convolutions: usize,
    pub poolings: usize,
    pub upsamplings: usize,
    pub merges: usize,
}

impl ArchSpec {
    /// The same topology with different widths.
    pub fn with_widths(enc_widths: [usize; 3], bottleneck: usize) -> Self {
        Self {
            enc_widths,
            bottleneck,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fixed = [
            ("conv_kernel", self.conv_kernel, 3),
            ("up_kernel", self.up_kernel, 2),
            ("pool_size", self.pool_size, 2),
            ("out_kernel", self.out_kernel, 1),
        ];
        for (name, got, want) in fixed {
            if got != want {
                return Err(NetError::Spec(format!("{name} must be {want}, got {got}")));
            }
        }
        if self.in_channels == 0 || self.bottleneck == 0 || self.enc_widths.contains(&0) {
            return Err(NetError::Spec(format!(
                "channel widths must be positive (in {}, encoder {:?}, bottleneck {})",
                self.in_channels, self.enc_widths, self.bottleneck
            )));
        }
        for (name, r) in [("dropout_enc3", self.dropout_enc3), ("dropout_bottleneck", self.dropout_bottleneck)] {
            if !(0.0..1.0).contains(&r) {
                return Err(NetError::Spec(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        Ok(())
    }

    /// Every learnable layer with its channel counts.
    pub fn layers(&self) -> Vec<LayerShape> {
        let [c1, c2, c3] = self.enc_widths;
        let c4 = self.bottleneck;
        let l = |i: usize, kind, c_in, c_out| LayerShape {
            name: LAYER_NAMES[i],
            kind,
            c_in,
            c_out,
        };
        use LayerKind::*;
        vec![
            l(0, Conv3, self.in_channels, c1),
            l(1, Conv3, c1, c1),
            l(2, Conv3, c1, c2),
            l(3, Conv3, c2, c2),
            l(4, Conv3, c2, c3),
            l(5, Conv3, c3, c3),
            l(6, Conv3, c3, c4),
            l(7, Conv3, c4, c4),
            l(8, Up2, c4, c3),
            l(9, Conv3, 2 * c3, c3),
            l(10, Up2, c3, c2),
            l(11, Conv3, 2 * c2, c2),
            l(12, Up2, c2, c1),
            l(13, Conv3, 2 * c1, c1),
            l(14, Conv3, c1, c1),
            l(15, Out1, c1, 1),
        ]
    }

    /// Execution graph, in order.
    pub fn stages(&self) -> Vec<Stage> {
        use Stage::*;
        let n = LAYER_NAMES;
        vec![
            Conv(n[0]),
            Conv(n[1]),
            Pool,
            Conv(n[2]),
            Conv(n[3]),
            Pool,
            Conv(n[4]),
            Conv(n[5]),
            Dropout,
            Pool,
            Conv(n[6]),
            Conv(n[7]),
            Dropout,
            Upsample(n[8]),
            Merge,
            Conv(n[9]),
            Upsample(n[10]),
            Merge,
            Conv(n[11]),
            Upsample(n[12]),
            Merge,
            Conv(n[13]),
            Conv(n[14]),
            Conv(n[15]),
            Sigmoid,
        ]
    }

    /// Learnable convolutions (upsampling convolutions included), poolings,
    /// upsamplings and skip merges.
    pub fn inventory(&self) -> Inventory {
        let st = self.stages();
        let count = |f: fn(&Stage) -> bool| st.iter().filter(|s| f(s)).count();
        Inventory {
            convolutions: count(|s| matches!(s, Stage::Conv(_) | Stage::Upsample(_))),
            poolings: count(|s| matches!(s, Stage::Pool)),
            upsamplings: count(|s| matches!(s, Stage::Upsample(_))),
            merges: count(|s| matches!(s, Stage::Merge)),
        }
    }

    /// Closed form: sum of `k·k·c_in·c_out + c_out` over the inventory.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::param_count).sum()
    }

    /// Spatial sizes must survive three 2× poolings.
    pub fn size_multiple(&self) -> usize {
        self.pool_size.pow(3)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("ArchSpec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn param_count(spec: &ArchSpec) -> usize {
    spec.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_inventory() {
        let inv = ArchSpec::default().inventory();
        assert_eq!(
            inv,
            Inventory {
                convolutions: 16,
                poolings: 3,
                upsamplings: 3,
                merges: 3
            }
        );
        assert_eq!(ArchSpec::default().layers().len(), 16);
    }

    #[test]
    fn first_conv_has_320_params() {
        assert_eq!(ArchSpec::default().layers()[0].param_count(), 320);
    }

    #[test]
    fn unit_widths_total() {
        let s = ArchSpec::with_widths([1, 1, 1], 1);
        // Eight plain convs at 10, three (up 5 + merge conv 19), penult 10, output 2.
        assert_eq!(s.param_count(), 8 * 10 + 3 * (5 + 19) + 10 + 2);
        assert_eq!(s.param_count(), 164);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(ArchSpec::with_widths([0, 1, 1], 1).validate().is_err());
        let mut s = ArchSpec::default();
        s.conv_kernel = 5;
        assert!(s.validate().is_err());
        s = ArchSpec::default();
        s.dropout_enc3 = 1.0;
        assert!(s.validate().is_err());
        assert!(ArchSpec::default().validate().is_ok());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ArchSpec::default();
        assert_eq!(a.fingerprint(), ArchSpec::default().fingerprint());
        assert_ne!(a.fingerprint(), ArchSpec::with_widths([8, 16, 32], 64).fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
