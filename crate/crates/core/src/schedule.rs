//! Diffusion noise schedules.
//!
//! A schedule is a table of cumulative signal fractions `alpha_bar[t]` for
//! t = 1..=N. On top of a base beta family, two transforms are supported:
//!
//! - **SNR shift** for higher-dimensional inputs: `SNR'(t) = SNR(t) * s²`
//!   with `s = sqrt(D·D / (T·H·W))` against a reference extent `D`, realized
//!   pointwise as `ᾱ' = s²ᾱ / (1 − ᾱ + s²ᾱ)`.
//! - **Terminal rescale** driving the last step to zero SNR, either in the
//!   squared-signal form `ᾱ' = (ᾱ_t − ᾱ_N) / (ᾱ_1 − ᾱ_N)` ([`RescaleForm::AlphaBar`])
//!   or the signal-amplitude form that keeps `√ᾱ_1` fixed
//!   ([`RescaleForm::SqrtAlphaBar`]).
//!
//! Schedules are immutable once built; the transforms return new values.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseFamily {
    /// Beta linear in t.
    LinearBeta,
    /// sqrt(beta) linear in t (the SD-lineage default).
    ScaledLinearBeta,
}

impl BaseFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseFamily::LinearBeta => "linear",
            BaseFamily::ScaledLinearBeta => "scaled-linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BaseFamily::LinearBeta),
            "scaled-linear" => Ok(BaseFamily::ScaledLinearBeta),
            other => Err(Error::Config(format!("unknown schedule family `{other}`"))),
        }
    }
}

/// Which algebraic form of the terminal rescale to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RescaleForm {
    /// Subtraction inside the square root, i.e. on ᾱ itself; forces ᾱ'_1 = 1.
    AlphaBar,
    /// Subtraction on √ᾱ, preserving √ᾱ_1.
    SqrtAlphaBar,
}

impl RescaleForm {
    pub fn as_str(self) -> &'static str {
        match self {
            RescaleForm::AlphaBar => "paper",
            RescaleForm::SqrtAlphaBar => "reference",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(RescaleForm::AlphaBar),
            "reference" => Ok(RescaleForm::SqrtAlphaBar),
            other => Err(Error::Config(format!("unknown rescale form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    n: usize,
    alpha_bar: Vec<f64>, // index 0 holds t = 1
    family: BaseFamily,
    beta_lo: f64,
    beta_hi: f64,
    shift_s: Option<f64>,
    shift_shape: Option<(usize, usize, usize)>,
    reference_d: usize,
    rescaled: Option<RescaleForm>,
}

/// `s = sqrt(D·D / (T·H·W))`.
pub fn shift_factor(t: usize, h: usize, w: usize, d: usize) -> Result<f64> {
    if t == 0 || h == 0 || w == 0 || d == 0 {
        return Err(Error::ScheduleContract(format!(
            "shift factor requires positive extents, got {t}x{h}x{w} with D={d}"
        )));
    }
    Ok(libm::sqrt((d * d) as f64 / (t * h * w) as f64))
}

impl NoiseSchedule {
    /// Build a base schedule: `ᾱ_t = Π_{i<=t} (1 − β_i)`.
    pub fn make_base(n: usize, family: BaseFamily, beta_lo: f64, beta_hi: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::ScheduleContract(format!(
                "timestep count must be >= 2, got {n}"
            )));
        }
        if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
            return Err(Error::InvalidBetaRange {
                lo: beta_lo,
                hi: beta_hi,
            });
        }
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0f64;
        for i in 0..n {
            let frac = i as f64 / (n - 1) as f64;
            let beta = match family {
                BaseFamily::LinearBeta => beta_lo + (beta_hi - beta_lo) * frac,
                BaseFamily::ScaledLinearBeta => {
                    let r =
                        libm::sqrt(beta_lo) + (libm::sqrt(beta_hi) - libm::sqrt(beta_lo)) * frac;
                    r * r
                }
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let sched = NoiseSchedule {
            n,
            alpha_bar,
            family,
            beta_lo,
            beta_hi,
            shift_s: None,
            shift_shape: None,
            reference_d: 256,
            rescaled: None,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// Rebuild a schedule by replaying its construction recipe; used when
    /// loading checkpoints so the table is re-derived in full precision.
    pub fn from_recipe(
        n: usize,
        family: BaseFamily,
        beta_lo: f64,
        beta_hi: f64,
        shift: Option<(f64, Option<(usize, usize, usize)>, usize)>,
        rescaled: Option<RescaleForm>,
    ) -> Result<Self> {
        let mut sched = Self::make_base(n, family, beta_lo, beta_hi)?;
        if let Some((s, shape, d)) = shift {
            sched = sched.apply_shift(s)?;
            sched.shift_shape = shape;
            sched.reference_d = d;
        }
        if let Some(form) = rescaled {
            sched = sched.apply_rescale(form)?;
        }
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        for (i, &a) in self.alpha_bar.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::ScheduleContract(format!(
                    "alpha_bar[{}] = {a} outside [0,1]",
                    i + 1
                )));
            }
            if i > 0 && a >= self.alpha_bar[i - 1] {
                return Err(Error::ScheduleContract(format!(
                    "alpha_bar not strictly decreasing at t={}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// ᾱ_t for t in 1..=N.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.n {
            return Err(Error::IndexOutOfRange {
                what: "timestep",
                index: t,
                limit: self.n,
            });
        }
        Ok(self.alpha_bar[t - 1])
    }

    pub fn family(&self) -> BaseFamily {
        self.family
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_lo, self.beta_hi)
    }

    pub fn shift_s(&self) -> Option<f64> {
        self.shift_s
    }

    pub fn shift_shape(&self) -> Option<(usize, usize, usize)> {
        self.shift_shape
    }

    pub fn reference_d(&self) -> usize {
        self.reference_d
    }

    pub fn rescaled(&self) -> Option<RescaleForm> {
        self.rescaled
    }

    pub fn is_rescaled(&self) -> bool {
        self.rescaled.is_some()
    }

    /// Whether the terminal step carries zero signal.
    pub fn zero_terminal(&self) -> bool {
        self.alpha_bar[self.n - 1] == 0.0
    }

    /// Multiply every SNR(t) by s²; pointwise `ᾱ' = s²ᾱ / (1 − ᾱ + s²ᾱ)`.
    /// The map x ↦ s²x/(1−x+s²x) is increasing on [0,1], so monotonicity
    /// is preserved. s = 1 is an exact no-op.
    pub fn apply_shift(&self, s: f64) -> Result<Self> {
        if self.shift_s.is_some() {
            return Err(Error::ScheduleContract(
                "schedule already shifted; double shift is out of contract".into(),
            ));
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::ScheduleContract(format!("invalid shift factor {s}")));
        }
        let mut out = self.clone();
        if s != 1.0 {
            let s2 = s * s;
            for a in out.alpha_bar.iter_mut() {
                *a = s2 * *a / (1.0 - *a + s2 * *a);
            }
        }
        out.shift_s = Some(s);
        out.validate()?;
        Ok(out)
    }

    /// Shift for a concrete latent-grid shape against reference extent `d`.
    pub fn apply_shift_for_shape(
        &self,
        frames: usize,
        height: usize,
        width: usize,
        d: usize,
    ) -> Result<Self> {
        let s = shift_factor(frames, height, width, d)?;
        let mut out = self.apply_shift(s)?;
        out.shift_shape = Some((frames, height, width));
        out.reference_d = d;
        Ok(out)
    }

    /// Force zero terminal SNR. The `AlphaBar` form maps the endpoints to
    /// exactly (1, 0); the `SqrtAlphaBar` form keeps ᾱ_1 and zeroes ᾱ_N.
    pub fn apply_rescale(&self, form: RescaleForm) -> Result<Self> {
        let first = self.alpha_bar[0];
        let last = self.alpha_bar[self.n - 1];
        if !(first > last) {
            return Err(Error::ScheduleContract(format!(
                "degenerate schedule: alpha_bar_1 = {first} <= alpha_bar_N = {last}"
            )));
        }
        let mut out = self.clone();
        match form {
            RescaleForm::AlphaBar => {
                for a in out.alpha_bar.iter_mut() {
                    *a = (*a - last) / (first - last);
                }
            }
            RescaleForm::SqrtAlphaBar => {
                let sf = libm::sqrt(first);
                let sl = libm::sqrt(last);
                for a in out.alpha_bar.iter_mut() {
                    let sa = (libm::sqrt(*a) - sl) * sf / (sf - sl);
                    *a = sa * sa;
                }
            }
        }
        out.rescaled = Some(form);
        out.validate()?;
        Ok(out)
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))` for the forward-noising mix.
    pub fn noising_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        Ok((libm::sqrt(a), libm::sqrt(1.0 - a)))
    }

    /// ln SNR(t); −inf where ᾱ_t = 0 and +inf where ᾱ_t = 1.
    pub fn log_snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        if a == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if a == 1.0 {
            return Ok(f64::INFINITY);
        }
        Ok(libm::log(a / (1.0 - a)))
    }

    /// All (t, ln SNR) rows, for CSV export.
    pub fn logsnr_rows(&self) -> Vec<(usize, f64)> {
        (1..=self.n)
            .map(|t| (t, self.log_snr(t).expect("t in range")))
            .collect()
    }

    /// Compact `key=value` header describing the construction recipe.
    pub fn header(&self) -> String {
        let mut h = format!(
            "family={} n={} beta_lo={} beta_hi={}",
            self.family.as_str(),
            self.n,
            self.beta_lo,
            self.beta_hi
        );
        if let Some(s) = self.shift_s {
            h.push_str(&format!(" s={s}"));
            if let Some((t, hh, w)) = self.shift_shape {
                h.push_str(&format!(" shift_shape={t}x{hh}x{w}"));
            }
            h.push_str(&format!(" reference_d={}", self.reference_d));
        }
        h.push_str(&format!(
            " rescaled={}",
            match self.rescaled {
                None => "none",
                Some(f) => f.as_str(),
            }
        ));
        h
    }

    /// The raw table as f32, for VTF serialization.
    pub fn table_f32(&self) -> Vec<f32> {
        self.alpha_bar.iter().map(|&a| a as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_base(n: usize) -> NoiseSchedule {
        NoiseSchedule::make_base(n, BaseFamily::ScaledLinearBeta, 0.00085, 0.012).unwrap()
    }

    #[test]
    fn hand_product_n2() {
        let s = NoiseSchedule::make_base(2, BaseFamily::LinearBeta, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
        assert_eq!(s.alpha_bar(2).unwrap(), 0.25);
    }

    #[test]
    fn linear_1000_leaves_residual_signal() {
        // the defect the rescale fixes: ᾱ_N stays well above zero
        let s = NoiseSchedule::make_base(1000, BaseFamily::LinearBeta, 1e-4, 0.02).unwrap();
        // independent direct-product oracle
        let mut acc = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64 / 999.0);
            acc *= 1.0 - beta;
        }
        let got = s.alpha_bar(1000).unwrap();
        assert_eq!(got, acc, "table disagrees with direct product");
        assert!((got - 4.04e-5).abs() / 4.04e-5 < 0.01, "alpha_bar_N = {got}");
        assert!(got > 0.0);
    }

    #[test]
    fn monotonically_decreasing_for_many_params() {
        for seed in 0..20u64 {
            let mut rng = crate::rng::Rng::new(seed);
            let lo = rng.next_range_f64(1e-5, 0.01);
            let hi = rng.next_range_f64(lo, 0.3);
            let n = 2 + rng.next_below(200);
            let family = if seed % 2 == 0 {
                BaseFamily::LinearBeta
            } else {
                BaseFamily::ScaledLinearBeta
            };
            let s = NoiseSchedule::make_base(n, family, lo, hi).unwrap();
            for t in 2..=n {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
        }
    }

    #[test]
    fn invalid_beta_range_rejected() {
        assert!(matches!(
            NoiseSchedule::make_base(10, BaseFamily::LinearBeta, 0.2, 0.1),
            Err(Error::InvalidBetaRange { .. })
        ));
        assert!(NoiseSchedule::make_base(10, BaseFamily::LinearBeta, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::make_base(10, BaseFamily::LinearBeta, 0.1, 1.0).is_err());
    }

    #[test]
    fn shift_factor_reference_cases() {
        // 16 frames at 512x512 against D=256 gives exactly 1/8
        assert_eq!(shift_factor(16, 512, 512, 256).unwrap(), 0.125);
        // a single reference-resolution image is unshifted
        assert_eq!(shift_factor(1, 256, 256, 256).unwrap(), 1.0);
        // 32 frames at 256x256
        let s = shift_factor(32, 256, 256, 256).unwrap();
        assert!((s - 1.0 / libm::sqrt(32.0)).abs() < 1e-15, "s = {s}");
        assert!((s - 0.176777).abs() < 1e-6);
    }

    #[test]
    fn shift_factor_zero_extent_is_error() {
        assert!(shift_factor(0, 256, 256, 256).is_err());
        assert!(shift_factor(16, 256, 256, 0).is_err());
    }

    #[test]
    fn apply_shift_snr_ratio_oracle() {
        // ᾱ = 0.5 shifted by s = 0.125 lands on 1/65
        let base = NoiseSchedule::make_base(2, BaseFamily::LinearBeta, 0.5, 0.5).unwrap();
        let shifted = base.apply_shift(0.125).unwrap();
        let a = shifted.alpha_bar(1).unwrap();
        assert!((a - 1.0 / 65.0).abs() < 1e-15, "alpha' = {a}");
        // oracle: recompute SNR ratio, must equal s² at every t
        for t in 1..=2 {
            let a0 = base.alpha_bar(t).unwrap();
            let a1 = shifted.alpha_bar(t).unwrap();
            let ratio = (a1 / (1.0 - a1)) / (a0 / (1.0 - a0));
            assert!((ratio - 0.125 * 0.125).abs() < 1e-12, "t={t}: {ratio}");
        }
    }

    #[test]
    fn shift_of_one_is_identity() {
        let base = default_base(100);
        let shifted = base.apply_shift(1.0).unwrap();
        for t in 1..=100 {
            assert_eq!(shifted.alpha_bar(t).unwrap(), base.alpha_bar(t).unwrap());
        }
    }

    #[test]
    fn double_shift_is_contract_error() {
        let shifted = default_base(10).apply_shift(0.5).unwrap();
        assert!(matches!(
            shifted.apply_shift(0.5),
            Err(Error::ScheduleContract(_))
        ));
    }

    #[test]
    fn log_snr_offset_is_two_log_s() {
        let base = default_base(1000);
        let s = 0.125;
        let shifted = base.apply_shift(s).unwrap();
        for t in 1..=1000 {
            let d = shifted.log_snr(t).unwrap() - base.log_snr(t).unwrap();
            assert!(
                (d - 2.0 * libm::log(s)).abs() < 1e-9,
                "t={t}: offset {d} vs {}",
                2.0 * libm::log(s)
            );
        }
    }

    #[test]
    fn rescale_endpoints_exact() {
        for &n in &[100usize, 1000] {
            for family in [BaseFamily::LinearBeta, BaseFamily::ScaledLinearBeta] {
                let (lo, hi) = match family {
                    BaseFamily::LinearBeta => (1e-4, 0.02),
                    BaseFamily::ScaledLinearBeta => (0.00085, 0.012),
                };
                let r = NoiseSchedule::make_base(n, family, lo, hi)
                    .unwrap()
                    .apply_rescale(RescaleForm::AlphaBar)
                    .unwrap();
                assert_eq!(r.alpha_bar(n).unwrap(), 0.0);
                assert_eq!(r.alpha_bar(1).unwrap(), 1.0);
                assert!(r.zero_terminal());
                // second-to-last stays nonzero
                assert!(r.alpha_bar(n - 1).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn rescale_mid_value_matches_independent_reimplementation() {
        let base = default_base(1000);
        let r = base.apply_rescale(RescaleForm::AlphaBar).unwrap();
        let a1 = base.alpha_bar(1).unwrap();
        let an = base.alpha_bar(1000).unwrap();
        for t in [2usize, 250, 500, 750, 999] {
            let want = (base.alpha_bar(t).unwrap() - an) / (a1 - an);
            let got = r.alpha_bar(t).unwrap();
            assert!((got - want).abs() < 1e-12, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn reference_rescale_preserves_alpha_bar_1() {
        let base = default_base(1000);
        let r = base.apply_rescale(RescaleForm::SqrtAlphaBar).unwrap();
        assert_eq!(r.alpha_bar(1000).unwrap(), 0.0);
        let got = r.alpha_bar(1).unwrap();
        let want = base.alpha_bar(1).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn noising_coeffs_endpoints_and_hand_case() {
        let r = default_base(100)
            .apply_rescale(RescaleForm::AlphaBar)
            .unwrap();
        assert_eq!(r.noising_coeffs(1).unwrap(), (1.0, 0.0));
        assert_eq!(r.noising_coeffs(100).unwrap(), (0.0, 1.0));

        // ᾱ = 0.75 → (√0.75, 0.5)
        let s = NoiseSchedule::make_base(2, BaseFamily::LinearBeta, 0.25, 0.25).unwrap();
        let (sa, sb) = s.noising_coeffs(1).unwrap();
        assert_eq!(sa, libm::sqrt(0.75));
        assert_eq!(sb, 0.5);
    }

    #[test]
    fn noising_coeffs_pythagorean_identity() {
        let sched = default_base(1000)
            .apply_shift(0.125)
            .unwrap()
            .apply_rescale(RescaleForm::AlphaBar)
            .unwrap();
        for t in 1..=1000 {
            let (a, b) = sched.noising_coeffs(t).unwrap();
            assert!((a * a + b * b - 1.0).abs() < 1e-7, "t={t}");
        }
    }

    #[test]
    fn noising_coeffs_t_out_of_range() {
        let s = default_base(10);
        assert!(s.noising_coeffs(0).is_err());
        assert!(s.noising_coeffs(11).is_err());
    }

    #[test]
    fn shift_then_rescale_composition_always_valid() {
        for seed in 0..20u64 {
            let mut rng = crate::rng::Rng::new(100 + seed);
            let s = rng.next_range_f64(0.01, 1.0);
            let sched = default_base(100)
                .apply_shift(s)
                .unwrap()
                .apply_rescale(RescaleForm::AlphaBar)
                .unwrap();
            assert_eq!(sched.alpha_bar(1).unwrap(), 1.0);
            assert_eq!(sched.alpha_bar(100).unwrap(), 0.0);
            for t in 2..=100 {
                assert!(sched.alpha_bar(t).unwrap() < sched.alpha_bar(t - 1).unwrap());
            }
        }
    }

    #[test]
    fn recipe_roundtrip_is_exact() {
        let sched = default_base(100)
            .apply_shift_for_shape(8, 16, 16, 16)
            .unwrap()
            .apply_rescale(RescaleForm::AlphaBar)
            .unwrap();
        let re = NoiseSchedule::from_recipe(
            100,
            BaseFamily::ScaledLinearBeta,
            0.00085,
            0.012,
            Some((sched.shift_s().unwrap(), sched.shift_shape(), 16)),
            Some(RescaleForm::AlphaBar),
        )
        .unwrap();
        for t in 1..=100 {
            assert_eq!(re.alpha_bar(t).unwrap(), sched.alpha_bar(t).unwrap());
        }
    }
}
