//! FBSDE coefficient sets: drift `b`, diffusion `beta`, terminal `g`, and the
//! generator `f(t, x, y, gamma)`, all with analytic first derivatives.

/// Scalar coefficient with analytic derivative, Lipschitz by construction.
#[derive(Clone, Copy, Debug)]
pub enum ScalarFn {
    Zero,
    Constant(f64),
    Identity,
    /// `slope * x + intercept`
    Linear {
        slope: f64,
        intercept: f64,
    },
    /// `base + amp * sin(x)`
    SinePerturbed {
        base: f64,
        amp: f64,
    },
    /// `sqrt(1 + x^2)` (smooth, 1-Lipschitz, Lipschitz derivative)
    SmoothHypot,
}

impl ScalarFn {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Constant(c) => c,
            ScalarFn::Identity => x,
            ScalarFn::Linear { slope, intercept } => slope * x + intercept,
            ScalarFn::SinePerturbed { base, amp } => base + amp * x.sin(),
            ScalarFn::SmoothHypot => (1.0 + x * x).sqrt(),
        }
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Zero | ScalarFn::Constant(_) => 0.0,
            ScalarFn::Identity => 1.0,
            ScalarFn::Linear { slope, .. } => slope,
            ScalarFn::SinePerturbed { amp, .. } => amp * x.cos(),
            ScalarFn::SmoothHypot => x / (1.0 + x * x).sqrt(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            ScalarFn::Zero | ScalarFn::Constant(_) => 0.0,
            ScalarFn::Identity => 1.0,
            ScalarFn::Linear { slope, .. } => slope.abs(),
            ScalarFn::SinePerturbed { amp, .. } => amp.abs(),
            ScalarFn::SmoothHypot => 1.0,
        }
    }
}

/// Deterministic function of time used by the linear generator slots.
#[derive(Clone, Copy, Debug)]
pub enum TimeFn {
    Constant(f64),
    /// `a + b * t`
    Affine {
        a: f64,
        b: f64,
    },
}

impl TimeFn {
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeFn::Constant(c) => c,
            TimeFn::Affine { a, b } => a + b * t,
        }
    }

    pub fn bound_on(&self, horizon: f64) -> f64 {
        match *self {
            TimeFn::Constant(c) => c.abs(),
            TimeFn::Affine { a, b } => a.abs().max((a + b * horizon).abs()),
        }
    }
}

/// Generator `f(t, x, y, gamma)` with analytic partials.
#[derive(Clone, Copy, Debug)]
pub enum Generator {
    Zero,
    /// `f1(t) + f2(t) y + f3(t) gamma` — linear in `(y, gamma)` and free of
    /// `x`, which is the form the Malliavin-weight scheme requires.
    Linear {
        f1: TimeFn,
        f2: TimeFn,
        f3: TimeFn,
    },
    /// `scale * tanh(y)`: nonlinear generator for exercising the implicit step.
    TanhY {
        scale: f64,
    },
}

impl Generator {
    #[inline]
    pub fn eval(&self, t: f64, _x: f64, y: f64, gamma: f64) -> f64 {
        match *self {
            Generator::Zero => 0.0,
            Generator::Linear { f1, f2, f3 } => f1.eval(t) + f2.eval(t) * y + f3.eval(t) * gamma,
            Generator::TanhY { scale } => scale * y.tanh(),
        }
    }

    #[inline]
    pub fn dy(&self, t: f64, _x: f64, y: f64, _gamma: f64) -> f64 {
        match *self {
            Generator::Zero => 0.0,
            Generator::Linear { f2, .. } => f2.eval(t),
            Generator::TanhY { scale } => {
                let c = y.cosh();
                scale / (c * c)
            }
        }
    }

    #[inline]
    pub fn dgamma(&self, t: f64) -> f64 {
        match *self {
            Generator::Zero => 0.0,
            Generator::Linear { f3, .. } => f3.eval(t),
            Generator::TanhY { .. } => 0.0,
        }
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        0.0 // no generator variant depends on x
    }

    /// The `(f1, f2, f3)` triple when `f` has the linear form.
    pub fn linear_form(&self) -> Option<(TimeFn, TimeFn, TimeFn)> {
        match *self {
            Generator::Zero => Some((
                TimeFn::Constant(0.0),
                TimeFn::Constant(0.0),
                TimeFn::Constant(0.0),
            )),
            Generator::Linear { f1, f2, f3 } => Some((f1, f2, f3)),
            Generator::TanhY { .. } => None,
        }
    }

    /// Lipschitz constant in `y` over the horizon.
    pub fn lipschitz_y(&self, horizon: f64) -> f64 {
        match *self {
            Generator::Zero => 0.0,
            Generator::Linear { f2, .. } => f2.bound_on(horizon),
            Generator::TanhY { scale } => scale.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoefficientSet {
    pub drift: ScalarFn,
    pub diffusion: ScalarFn,
    pub terminal: ScalarFn,
    pub generator: Generator,
}

impl CoefficientSet {
    pub fn lipschitz(&self, horizon: f64) -> f64 {
        self.drift
            .lipschitz()
            .max(self.diffusion.lipschitz())
            .max(self.terminal.lipschitz())
            .max(self.generator.lipschitz_y(horizon))
    }
}

/// `b = 0`, `beta = 1`, `g(x) = x`, `f = 0`.
pub fn zero_f_identity_g() -> CoefficientSet {
    CoefficientSet {
        drift: ScalarFn::Zero,
        diffusion: ScalarFn::Constant(1.0),
        terminal: ScalarFn::Identity,
        generator: Generator::Zero,
    }
}

/// `b = 0`, `beta(x) = 1 + beta_amp sin(x)`, `g(x) = x`, `f = f2 * y`.
pub fn linear_bsde(f2: f64, beta_amp: f64) -> CoefficientSet {
    linear_bsde_with(0.0, f2, beta_amp, 0.0)
}

/// Full-slot linear-BSDE preset: `b(x) = -drift_rate x`,
/// `beta(x) = 1 + beta_amp sin(x)`, `g(x) = x`, `f = f1 + f2 y`. The value
/// function stays affine in `x`, so both backward schemes target the same
/// `Gamma` and the polynomial basis spans the truth; the remaining error is
/// the pathwise strong component the rate experiments are after.
pub fn linear_bsde_with(f1: f64, f2: f64, beta_amp: f64, drift_rate: f64) -> CoefficientSet {
    let diffusion = if beta_amp == 0.0 {
        ScalarFn::Constant(1.0)
    } else {
        ScalarFn::SinePerturbed {
            base: 1.0,
            amp: beta_amp,
        }
    };
    let drift = if drift_rate == 0.0 {
        ScalarFn::Zero
    } else {
        ScalarFn::Linear {
            slope: -drift_rate,
            intercept: 0.0,
        }
    };
    CoefficientSet {
        drift,
        diffusion,
        terminal: ScalarFn::Identity,
        generator: Generator::Linear {
            f1: TimeFn::Constant(f1),
            f2: TimeFn::Constant(f2),
            f3: TimeFn::Constant(0.0),
        },
    }
}

/// Mean-reverting drift, sine-perturbed diffusion, smooth nonlinear terminal,
/// linear generator: the workhorse model for rate experiments.
pub fn lipschitz_smooth(f2: f64, beta_amp: f64, drift_rate: f64) -> CoefficientSet {
    CoefficientSet {
        drift: ScalarFn::Linear {
            slope: -drift_rate,
            intercept: 0.0,
        },
        diffusion: ScalarFn::SinePerturbed {
            base: 1.0,
            amp: beta_amp,
        },
        terminal: ScalarFn::SmoothHypot,
        generator: Generator::Linear {
            f1: TimeFn::Constant(0.0),
            f2: TimeFn::Constant(f2),
            f3: TimeFn::Constant(0.0),
        },
    }
}
