//! Ideal-gas state relations.
//!
//! Molar properties from the intensive pair (T, p), temperature recovery
//! from the extensive triple (S, N, V), and the total internal energy
//! U(S, N, V). All per-mole quantities are measured relative to a reference
//! point (T_ref, p_ref) whose property values are free constants; only
//! differences of u, h, s, mu are physical.

use thiserror::Error;

/// Domain failure in a state-relation evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GasError {
    /// A quantity that must be strictly positive was not.
    #[error("{field} must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    /// A construction consistency rule was violated.
    #[error("inconsistent gas definition: {0}")]
    Inconsistent(String),
}

/// Ideal-gas constants and reference state.
///
/// Every property formula in the crate derives from these numbers. The
/// redundant fields (`c_p`, `h_ref`, `mu_ref`) are stored explicitly and
/// checked for consistency so that downstream formulas can use whichever
/// form reads best.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GasSpec {
    /// Gas constant (J/(K·mol)).
    pub r: f64,
    /// Molar heat capacity at constant volume (J/(K·mol)).
    pub c_v: f64,
    /// Molar heat capacity at constant pressure (J/(K·mol)); equals `c_v + r`.
    pub c_p: f64,
    /// Reference temperature (K).
    pub t_ref: f64,
    /// Reference pressure (Pa).
    pub p_ref: f64,
    /// Molar internal energy at the reference point (J/mol).
    pub u_ref: f64,
    /// Molar enthalpy at the reference point (J/mol); equals `u_ref + r·t_ref`.
    pub h_ref: f64,
    /// Molar entropy at the reference point (J/(K·mol)).
    pub s_ref: f64,
    /// Chemical potential at the reference point (J/mol); equals `h_ref − t_ref·s_ref`.
    pub mu_ref: f64,
    /// Molar mass (kg/mol).
    pub m0: f64,
}

/// Molar state of the gas at one intensive point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MolarState {
    /// Temperature (K).
    pub t: f64,
    /// Pressure (Pa).
    pub p: f64,
    /// Molar volume (m³/mol).
    pub v: f64,
    /// Molar internal energy (J/mol).
    pub u: f64,
    /// Molar entropy (J/(K·mol)).
    pub s: f64,
    /// Molar enthalpy (J/mol).
    pub h: f64,
    /// Chemical potential (J/mol).
    pub mu: f64,
}

fn require_positive(field: &'static str, value: f64) -> Result<(), GasError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(GasError::NonPositive { field, value })
    }
}

impl GasSpec {
    /// Builds a spec from the free parameters, deriving `c_p`, `h_ref`, and
    /// `mu_ref` from the consistency rules.
    pub fn new(
        r: f64,
        c_v: f64,
        t_ref: f64,
        p_ref: f64,
        u_ref: f64,
        s_ref: f64,
        m0: f64,
    ) -> Result<Self, GasError> {
        let h_ref = u_ref + r * t_ref;
        let spec = GasSpec {
            r,
            c_v,
            c_p: c_v + r,
            t_ref,
            p_ref,
            u_ref,
            h_ref,
            s_ref,
            mu_ref: h_ref - t_ref * s_ref,
            m0,
        };
        spec.check()?;
        Ok(spec)
    }

    /// Nitrogen-like spec used by the bundled demos.
    pub fn nitrogen_like() -> Self {
        Self::new(8.314, 20.785, 298.15, 101_325.0, 6_197.0, 191.6, 0.028)
            .expect("demo constants are consistent")
    }

    /// Validates all construction rules; returns the first violation found.
    pub fn check(&self) -> Result<(), GasError> {
        require_positive("R", self.r)?;
        require_positive("c_v", self.c_v)?;
        require_positive("T_ref", self.t_ref)?;
        require_positive("p_ref", self.p_ref)?;
        require_positive("M0", self.m0)?;
        let cp_expect = self.c_v + self.r;
        if (self.c_p - cp_expect).abs() > 1e-12 * cp_expect.abs() {
            return Err(GasError::Inconsistent(format!(
                "c_p = {} but c_v + R = {}",
                self.c_p, cp_expect
            )));
        }
        let h_expect = self.u_ref + self.r * self.t_ref;
        if (self.h_ref - h_expect).abs() > 1e-12 * h_expect.abs().max(1.0) {
            return Err(GasError::Inconsistent(format!(
                "h_ref = {} but u_ref + R·T_ref = {}",
                self.h_ref, h_expect
            )));
        }
        Ok(())
    }

    /// Molar state at temperature `t` (K) and pressure `p` (Pa).
    pub fn molar_state(&self, t: f64, p: f64) -> Result<MolarState, GasError> {
        require_positive("T", t)?;
        require_positive("p", p)?;
        let v = self.r * t / p;
        let u = self.c_v * (t - self.t_ref) + self.u_ref;
        let s = -self.r * (p / self.p_ref).ln() + self.c_p * (t / self.t_ref).ln() + self.s_ref;
        let h = self.c_p * (t - self.t_ref) + self.h_ref;
        let mu = h - t * s;
        Ok(MolarState { t, p, v, u, s, h, mu })
    }

    /// Total entropy of `n` moles filling volume `vol` at temperature `t`.
    pub fn entropy_total(&self, t: f64, n: f64, vol: f64) -> Result<f64, GasError> {
        require_positive("N", n)?;
        require_positive("V", vol)?;
        let p = n * self.r * t / vol;
        Ok(n * self.molar_state(t, p)?.s)
    }

    /// The unique temperature at which `n` moles in volume `vol` carry total
    /// entropy `s_total`. Closed form: the molar entropy at p = NRT/V is
    /// linear in ln T with slope c_v.
    pub fn temperature_from_extensive(
        &self,
        s_total: f64,
        n: f64,
        vol: f64,
    ) -> Result<f64, GasError> {
        require_positive("N", n)?;
        require_positive("V", vol)?;
        let ln_t = (s_total / n - self.s_ref
            + self.c_p * self.t_ref.ln()
            + self.r * (n * self.r / (vol * self.p_ref)).ln())
            / self.c_v;
        let t = ln_t.exp();
        require_positive("T", t)?;
        Ok(t)
    }

    /// Full intensive state from the extensive triple (S, N, V).
    pub fn intensive_from_extensive(
        &self,
        s_total: f64,
        n: f64,
        vol: f64,
    ) -> Result<MolarState, GasError> {
        let t = self.temperature_from_extensive(s_total, n, vol)?;
        let p = n * self.r * t / vol;
        self.molar_state(t, p)
    }

    /// Total internal energy U(S, N, V) = N·u(T(S, N, V)).
    pub fn internal_energy_total(&self, s_total: f64, n: f64, vol: f64) -> Result<f64, GasError> {
        let t = self.temperature_from_extensive(s_total, n, vol)?;
        Ok(n * (self.c_v * (t - self.t_ref) + self.u_ref))
    }
}
