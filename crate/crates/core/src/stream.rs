//! Counter-based random streams.
//!
//! Every random quantity in the library is drawn from a substream that is a
//! pure function of `(master seed, path index, channel)`. Path blocks can be
//! simulated on any number of threads in any order and still produce
//! bit-identical output, and two simulations sharing a master seed share
//! exactly the noise channels they have in common (Brownian skeleton, jump
//! annuli), which is what makes pathwise coupling work.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Channel identifiers. Brownian levels occupy `CH_BROWNIAN + level`.
pub const CH_BROWNIAN: u64 = 0x0100;
pub const CH_BROWNIAN_FLAT: u64 = 0x01FF;
pub const CH_JUMP_BASE: u64 = 0x0200;
pub const CH_BOOTSTRAP: u64 = 0x0300;

/// Channel for jumps with marks in the annulus `(lo, hi]`. Two runs that share
/// an annulus share its jump draws.
pub fn jump_channel(lo: f64, hi: f64) -> u64 {
    CH_JUMP_BASE ^ mix(lo.to_bits()) ^ mix(hi.to_bits()).rotate_left(17)
}

/// SplitMix64 stream.
#[derive(Clone, Debug)]
pub struct Stream {
    state: u64,
    spare_normal: Option<f64>,
}

pub fn substream(seed: u64, path: u64, channel: u64) -> Stream {
    let a = mix(seed ^ 0x243F_6A88_85A3_08D3);
    let b = mix(a ^ path.wrapping_mul(GOLDEN));
    let c = mix(b ^ channel.wrapping_mul(0xD1B5_4A32_D192_ED03));
    Stream {
        state: c,
        spare_normal: None,
    }
}

impl Stream {
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform on (0, 1].
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform index in `0..n` without modulo bias.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; the second value of each pair is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Poisson draw by the product method, chunked so it stays exact for
    /// large intensities.
    pub fn next_poisson(&mut self, lambda: f64) -> u64 {
        assert!(lambda.is_finite() && lambda >= 0.0, "bad intensity");
        let mut remaining = lambda;
        let mut total = 0u64;
        while remaining > 0.0 {
            let chunk = remaining.min(30.0);
            remaining -= chunk;
            let limit = (-chunk).exp();
            let mut p = 1.0;
            let mut k = 0u64;
            loop {
                p *= self.next_f64();
                if p <= limit {
                    break;
                }
                k += 1;
            }
            total += k;
        }
        total
    }
}

/// Brownian increments for a dyadic grid `n = 2^L` on `[0, horizon]`, built by
/// midpoint refinement. Grids with different `L` under the same
/// `(seed, path)` are increments of one underlying Brownian path, so a fine
/// grid refines a coarse one exactly.
pub fn brownian_increments_dyadic(seed: u64, path: u64, horizon: f64, n: usize) -> Vec<f64> {
    debug_assert!(n.is_power_of_two());
    let levels = n.trailing_zeros() as usize;
    // w holds W(t) at the current resolution, endpoints included.
    let mut w = vec![0.0; 2];
    let mut s = substream(seed, path, CH_BROWNIAN);
    w[1] = horizon.sqrt() * s.next_normal();
    for level in 1..=levels {
        let pts = (1usize << level) + 1;
        let mut finer = vec![0.0; pts];
        // spacing being refined is horizon / 2^(level-1); midpoint sd = sqrt(spacing / 4)
        let sd = (horizon / (1u64 << (level + 1)) as f64).sqrt();
        let mut sl = substream(seed, path, CH_BROWNIAN + level as u64);
        for k in 0..(1usize << (level - 1)) {
            finer[2 * k] = w[k];
            finer[2 * k + 1] = 0.5 * (w[k] + w[k + 1]) + sd * sl.next_normal();
        }
        finer[pts - 1] = w[w.len() - 1];
        w = finer;
    }
    (0..n).map(|i| w[i + 1] - w[i]).collect()
}

/// Brownian increments for a non-dyadic grid: plain i.i.d. draws. These do not
/// couple across grid sizes.
pub fn brownian_increments_flat(seed: u64, path: u64, horizon: f64, n: usize) -> Vec<f64> {
    let dt = horizon / n as f64;
    let sd = dt.sqrt();
    let mut s = substream(seed, path, CH_BROWNIAN_FLAT);
    (0..n).map(|_| sd * s.next_normal()).collect()
}

pub fn brownian_increments(seed: u64, path: u64, horizon: f64, n: usize) -> Vec<f64> {
    if n.is_power_of_two() {
        brownian_increments_dyadic(seed, path, horizon, n)
    } else {
        brownian_increments_flat(seed, path, horizon, n)
    }
}
