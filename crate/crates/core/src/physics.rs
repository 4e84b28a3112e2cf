//! Closed-form acoustics: Thorp absorption, geometric spreading, the
//! trainable physics mean, and the JOMOPANS-ECHO vessel source level.

/// Learnable coefficients of the physics mean: `A·log10(R) + B·α(f)·R_km`.
///
/// `A` starts at 20 (spherical spreading) and `B` at 1; both are unconstrained
/// reals during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsMeanParams {
    pub a: f64,
    pub b: f64,
}

impl Default for PhysicsMeanParams {
    fn default() -> Self {
        PhysicsMeanParams { a: 20.0, b: 1.0 }
    }
}

/// JOMOPANS-ECHO design constants plus the vessel length they scale against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSpec {
    pub vessel_length_m: f64,
}

impl SourceSpec {
    pub const V_C: f64 = 13.9;
    pub const K: f64 = 191.0;
    pub const D: f64 = 3.0;
    pub const L_0: f64 = 100.0;

    pub fn new(vessel_length_m: f64) -> Self {
        assert!(vessel_length_m > 0.0, "vessel length must be positive");
        SourceSpec { vessel_length_m }
    }
}

/// Thorp's empirical seawater absorption coefficient, dB/km, frequency in kHz.
pub fn thorp_alpha(f_khz: f64) -> f64 {
    let f2 = f_khz * f_khz;
    0.11 * f2 / (1.0 + f2) + 44.0 * f2 / (4100.0 + f2) + 2.75e-4 * f2 + 0.003
}

/// Geometric spreading loss `A·log10(R)` in dB, range in meters (>= 1).
pub fn spreading_db(r_m: f64, a: f64) -> f64 {
    a * r_m.log10()
}

/// The physics mean: spreading plus absorption. The absorption term converts
/// range to kilometers because Thorp yields dB/km while the log term uses
/// meters (dB re 1 m).
pub fn physics_mean_tl(r_m: f64, f_khz: f64, p: &PhysicsMeanParams) -> f64 {
    p.a * r_m.log10() + p.b * thorp_alpha(f_khz) * (r_m / 1000.0)
}

/// JOMOPANS-ECHO near-field source level for a vessel of length `l_m` at
/// `v_knots`, one-third-octave band centered at `f_hz`. dB re 1 µPa at 1 m.
pub fn jomopans_echo_sl(f_hz: f64, v_knots: f64, l_m: f64) -> f64 {
    let fc = 480.0 / SourceSpec::V_C;
    SourceSpec::K - 20.0 * fc.log10() - 10.0 * ((1.0 - f_hz / fc).powi(2) + SourceSpec::D * SourceSpec::D).log10()
        + 60.0 * (v_knots / SourceSpec::V_C).log10()
        + 20.0 * (l_m / SourceSpec::L_0).log10()
        + 10.0 * (0.231 * f_hz).log10()
}
