//! Encoder/decoder over (N, C, T, F) feature maps. Only the frequency axis
//! is downsampled, so every level keeps the full frame resolution.

use super::layers::{Conv, Layout};
use crate::nn::{concat, Var};

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    down: Vec<(Conv, Conv)>,
    bottleneck: Conv,
    up: Vec<Conv>,
    head: Conv,
}

/// Channels at encoder level `k`.
pub(crate) fn level_channels(base: usize, k: usize) -> usize {
    base * (k + 1)
}

impl UNet {
    pub fn new(layout: &mut Layout, name: &str, depth: usize, base: usize, cin: usize, cout: usize) -> Self {
        let mut down = Vec::with_capacity(depth);
        let mut c_prev = cin;
        for k in 0..depth {
            let c = level_channels(base, k);
            let conv = Conv::k3(layout, &format!("{name}.enc{k}.conv"), c_prev, c, 1);
            let pool = Conv::k3(layout, &format!("{name}.enc{k}.down"), c, level_channels(base, k + 1), 2);
            down.push((conv, pool));
            c_prev = level_channels(base, k + 1);
        }
        let bottleneck = Conv::k3(layout, &format!("{name}.mid"), c_prev, c_prev, 1);
        let mut up = Vec::with_capacity(depth);
        for k in (0..depth).rev() {
            let c = level_channels(base, k);
            let below = level_channels(base, k + 1);
            up.push(Conv::k3(layout, &format!("{name}.dec{k}.conv"), below + c, c, 1));
        }
        let head = Conv::k1(layout, &format!("{name}.head"), level_channels(base, 0), cout);
        Self {
            down,
            bottleneck,
            up,
            head,
        }
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        let mut h = x;
        let mut skips = Vec::with_capacity(self.down.len());
        for (conv, pool) in &self.down {
            h = conv.forward(p, h).elu();
            skips.push(h);
            h = pool.forward(p, h).elu();
        }
        h = self.bottleneck.forward(p, h).elu();
        for (conv, skip) in self.up.iter().zip(skips.iter().rev()) {
            let width = *skip.shape().last().expect("4-d feature map");
            h = h.upsample_last(width);
            h = concat(&[h, *skip], 1);
            h = conv.forward(p, h).elu();
        }
        self.head.forward(p, h)
    }

    /// Frames of context on each side of an output frame: the deepest path
    /// crosses two convolutions per encoder level, the bottleneck and one
    /// per decoder level.
    pub fn time_radius(&self) -> usize {
        let enc: usize = self.down.iter().map(|(a, b)| a.time_radius() + b.time_radius()).sum();
        let dec: usize = self.up.iter().map(Conv::time_radius).sum();
        enc + self.bottleneck.time_radius() + dec + self.head.time_radius()
    }
}
