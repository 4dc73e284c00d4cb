//! Receptive-field radii, used to size the halo of a split forward pass.

use crate::network::NetworkConfig;
use crate::ops::ConvSpec;

/// How far, in input pixels, an output pixel can see along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub vertical: usize,
    pub horizontal: usize,
}

/// Running jump/extent state along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Axis {
    /// Input pixels between adjacent samples of the current feature map.
    jump: f64,
    /// Reach of one sample around its centre, in input pixels.
    radius: f64,
    /// Centre of sample 0, in input pixels.
    offset: f64,
}

impl Axis {
    const INPUT: Axis = Axis {
        jump: 1.0,
        radius: 0.0,
        offset: 0.0,
    };

    fn conv(self, k: usize, s: usize, d: usize, p: usize) -> Axis {
        let half = (d * (k - 1)) as f64 / 2.0;
        Axis {
            jump: self.jump * s as f64,
            radius: self.radius + self.jump * half,
            offset: self.offset + self.jump * (half - p as f64),
        }
    }

    /// Bilinear resize back onto the input grid: each output blends two
    /// samples per axis, each at most two jumps away.
    fn resize_to_input(self) -> f64 {
        if self.jump == 1.0 && self.offset == 0.0 {
            self.radius
        } else {
            self.radius + 2.0 * self.jump + self.offset.abs()
        }
    }
}

fn chain_axes(specs: &[ConvSpec]) -> (Axis, Axis) {
    specs.iter().fold((Axis::INPUT, Axis::INPUT), |(v, h), s| {
        (
            v.conv(s.kernel.0, s.stride.0, s.dilation.0, s.padding.0),
            h.conv(s.kernel.1, s.stride.1, s.dilation.1, s.padding.1),
        )
    })
}

impl ReceptiveField {
    /// Radius of a plain stack of convolutions, read at the output grid.
    pub fn of_chain(specs: &[ConvSpec]) -> ReceptiveField {
        let (v, h) = chain_axes(specs);
        ReceptiveField {
            vertical: (v.radius + v.offset.abs()).ceil() as usize,
            horizontal: (h.radius + h.offset.abs()).ceil() as usize,
        }
    }

    /// Radius of the full network: the widest of the fused branches after
    /// each is resized back to input resolution. The head is pointwise.
    pub fn of_network(cfg: &NetworkConfig) -> ReceptiveField {
        let mut chain: Vec<ConvSpec> = Vec::new();
        let mut ch = cfg.input_channels;
        for &w in &cfg.stem_widths {
            chain.push(ConvSpec::square(ch, w, 3, 1, 1));
            ch = w;
        }
        let mut branches = vec![chain_axes(&chain)];
        for s in 0..cfg.stage_blocks.len() {
            let w = cfg.stage_widths[s];
            let d = cfg.stage_dilations[s];
            for b in 0..cfg.stage_blocks[s] {
                let stride = if b == 0 { cfg.stage_strides[s] } else { 1 };
                chain.push(ConvSpec::square(ch, w, 3, stride, d));
                chain.push(ConvSpec::square(w, w, 3, 1, d));
                ch = w;
            }
            branches.push(chain_axes(&chain));
        }
        let reach = |f: fn(&(Axis, Axis)) -> Axis| {
            branches
                .iter()
                .map(|b| f(b).resize_to_input())
                .fold(0.0f64, f64::max)
                .ceil() as usize
        };
        ReceptiveField {
            vertical: reach(|b| b.0),
            horizontal: reach(|b| b.1),
        }
    }
}
