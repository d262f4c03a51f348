//! Counter-based splittable RNG.
//!
//! Every particle in an ensemble owns an independent stream keyed by
//! (master seed, particle index); draws within a stream advance a counter
//! through the splitmix64 permutation. A particle's trajectory therefore
//! depends only on its key, never on scheduling, which is what makes ensemble
//! output bitwise reproducible under any thread count.

/// One independent draw stream.
#[derive(Clone, Debug)]
pub struct CounterRng {
    state: u64,
    spare_normal: Option<f64>,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CounterRng {
    /// Stream `index` under `master`. Distinct (master, index) pairs give
    /// statistically independent streams.
    pub fn stream(master: u64, index: u64) -> Self {
        // Double-mix the key so that adjacent indices land far apart.
        let key = mix(master ^ mix(index.wrapping_mul(GOLDEN).wrapping_add(1)));
        CounterRng { state: key, spare_normal: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform draw in the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits; add half an ulp so 0 is excluded.
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal via Box-Muller; the pair's second value is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fresh d-dimensional standard normal vector.
    pub fn normal_vector(&mut self, dim: usize) -> crate::State {
        crate::State::from_fn(dim, |_, _| self.normal())
    }
}
