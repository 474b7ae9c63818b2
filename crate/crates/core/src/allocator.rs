//! Water-filling allocation of an information budget across channels, plus
//! the projected dual-ascent multiplier update.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Aib,
    Xib,
}

/// Marginal utility `U(R)` of extra rate, nonincreasing and nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum UtilityCurve {
    /// `a / (1 + R)`
    Reciprocal { a: f64 },
    /// `a * exp(-b R)`
    Exponential { a: f64, b: f64 },
    /// Piecewise-linear through `(rate, utility)` knots starting at rate 0;
    /// zero past the last knot.
    Tabulated { knots: Vec<(f64, f64)> },
}

impl UtilityCurve {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        match self {
            UtilityCurve::Reciprocal { a } => {
                if !(*a >= 0.0) || !a.is_finite() {
                    return bad(format!("reciprocal scale must be >= 0, got {a}"));
                }
            }
            UtilityCurve::Exponential { a, b } => {
                if !(*a >= 0.0) || !a.is_finite() || !(*b > 0.0) || !b.is_finite() {
                    return bad(format!("exponential needs a >= 0 and b > 0, got ({a}, {b})"));
                }
            }
            UtilityCurve::Tabulated { knots } => {
                let Some(first) = knots.first() else {
                    return bad("tabulated curve has no knots".into());
                };
                if first.0 != 0.0 {
                    return bad("first knot must sit at rate 0".into());
                }
                if knots.iter().any(|(r, u)| !r.is_finite() || !u.is_finite() || *u < 0.0) {
                    return bad("knots must be finite with nonnegative utility".into());
                }
                for w in knots.windows(2) {
                    if !(w[1].0 > w[0].0) {
                        return bad("knot rates must be strictly increasing".into());
                    }
                    if w[1].1 > w[0].1 {
                        return bad("tabulated utility must be nonincreasing".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Curve value ignoring any rate cap.
    pub fn value(&self, rate: f64) -> f64 {
        match self {
            UtilityCurve::Reciprocal { a } => a / (1.0 + rate),
            UtilityCurve::Exponential { a, b } => a * (-b * rate).exp(),
            UtilityCurve::Tabulated { knots } => {
                for w in knots.windows(2) {
                    let ((r0, u0), (r1, u1)) = (w[0], w[1]);
                    if rate <= r1 {
                        return u0 + (u1 - u0) * (rate - r0) / (r1 - r0);
                    }
                }
                // single knot or past the end: left value at the last knot
                let last = knots[knots.len() - 1];
                if rate <= last.0 {
                    last.1
                } else {
                    0.0
                }
            }
        }
    }

    /// Rate at which the curve itself stops (last knot for tables).
    fn natural_end(&self) -> f64 {
        match self {
            UtilityCurve::Tabulated { knots } => knots[knots.len() - 1].0,
            _ => f64::INFINITY,
        }
    }

    /// Length of `{R in [0, end) : U(R) > level}`.
    fn superlevel(&self, level: f64) -> f64 {
        match self {
            UtilityCurve::Reciprocal { a } => {
                if level <= 0.0 {
                    if *a > 0.0 { f64::INFINITY } else { 0.0 }
                } else {
                    (a / level - 1.0).max(0.0)
                }
            }
            UtilityCurve::Exponential { a, b } => {
                if level <= 0.0 {
                    if *a > 0.0 { f64::INFINITY } else { 0.0 }
                } else if *a > level {
                    (a / level).ln() / b
                } else {
                    0.0
                }
            }
            UtilityCurve::Tabulated { knots } => {
                if knots[0].1 <= level {
                    return 0.0;
                }
                for w in knots.windows(2) {
                    let ((r0, u0), (r1, u1)) = (w[0], w[1]);
                    if u1 <= level {
                        return r0 + (u0 - level) / (u0 - u1) * (r1 - r0);
                    }
                }
                knots[knots.len() - 1].0
            }
        }
    }

    /// `int_0^R U(r) dr`.
    pub fn integral(&self, rate: f64) -> f64 {
        match self {
            UtilityCurve::Reciprocal { a } => a * rate.ln_1p(),
            UtilityCurve::Exponential { a, b } => a / b * (1.0 - (-b * rate).exp()),
            UtilityCurve::Tabulated { knots } => {
                let mut acc = 0.0;
                for w in knots.windows(2) {
                    let ((r0, u0), (r1, _)) = (w[0], w[1]);
                    if rate <= r0 {
                        break;
                    }
                    let hi = rate.min(r1);
                    let u_hi = self.value(hi);
                    acc += 0.5 * (u0 + u_hi) * (hi - r0);
                }
                acc
            }
        }
    }
}

/// One information channel competing for the shared budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub id: String,
    pub kind: ChannelKind,
    pub curve: UtilityCurve,
    /// `None` means unbounded.
    pub max_rate: Option<f64>,
}

impl Channel {
    pub fn new(id: impl Into<String>, kind: ChannelKind, curve: UtilityCurve, max_rate: Option<f64>) -> Result<Self> {
        curve.validate()?;
        if let Some(m) = max_rate {
            if !(m > 0.0) {
                return contract(format!("max rate must be positive, got {m}"));
            }
        }
        Ok(Self { id: id.into(), kind, curve, max_rate })
    }

    pub fn reciprocal(id: impl Into<String>, a: f64) -> Result<Self> {
        Self::new(id, ChannelKind::Aib, UtilityCurve::Reciprocal { a }, None)
    }

    /// Highest rate this channel can absorb.
    pub fn cap(&self) -> f64 {
        self.curve.natural_end().min(self.max_rate.unwrap_or(f64::INFINITY))
    }

    /// Marginal utility at `rate`; zero at or past the cap.
    pub fn utility(&self, rate: f64) -> f64 {
        if rate >= self.cap() {
            0.0
        } else {
            self.curve.value(rate)
        }
    }

    /// Rate this channel takes at water level `level`.
    pub fn rate_at(&self, level: f64) -> f64 {
        self.curve.superlevel(level).min(self.cap())
    }

    /// Total utility collected up to `rate`.
    pub fn objective(&self, rate: f64) -> f64 {
        self.curve.integral(rate.min(self.cap()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub rates: Vec<(String, f64)>,
    pub water_level: f64,
    pub budget: f64,
    pub budget_used: f64,
}

impl AllocationResult {
    pub fn rate(&self, id: &str) -> Option<f64> {
        self.rates.iter().find(|(c, _)| c == id).map(|(_, r)| *r)
    }

    pub fn objective(&self, channels: &[Channel]) -> f64 {
        channels.iter().zip(&self.rates).map(|(c, (_, r))| c.objective(*r)).sum()
    }
}

pub const DEFAULT_TOL: f64 = 1e-8;
pub const MAX_BISECTION_ITERS: usize = 200;

/// Equalises marginal utility across active channels by bisection on the
/// water level.
pub fn water_fill(channels: &[Channel], budget: f64, tol: f64) -> Result<AllocationResult> {
    if channels.is_empty() {
        return contract("no channels");
    }
    if !(budget > 0.0) || !budget.is_finite() {
        return contract(format!("budget must be positive, got {budget}"));
    }
    if !(tol > 0.0) {
        return contract("tolerance must be positive");
    }
    for c in channels {
        c.curve.validate()?;
    }
    let total = |level: f64| channels.iter().map(|c| c.rate_at(level)).sum::<f64>();
    let finish = |rates: Vec<f64>, level: f64| {
        let budget_used = rates.iter().sum();
        AllocationResult {
            rates: channels.iter().map(|c| c.id.clone()).zip(rates).collect(),
            water_level: level,
            budget,
            budget_used,
        }
    };

    // slack budget: every channel saturates and information is free
    if total(0.0) <= budget {
        return Ok(finish(channels.iter().map(|c| c.rate_at(0.0)).collect(), 0.0));
    }

    let mut lo = 0.0;
    let mut hi = channels.iter().map(|c| c.utility(0.0)).fold(0.0, f64::max);
    let mut iters = 0;
    while hi - lo > tol || lo == 0.0 {
        if iters == MAX_BISECTION_ITERS {
            return Err(Error::Convergence {
                iterations: iters,
                diagnostics: format!(
                    "water level bracket [{lo:e}, {hi:e}], allocated {:e} of {budget:e}",
                    total(hi)
                ),
            });
        }
        let mid = 0.5 * (lo + hi);
        if total(mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }

    // rates at hi fit in the budget; hand out the remainder along the
    // channels whose rate jumps between hi and lo (flat stretches included)
    let upper: Vec<f64> = channels.iter().map(|c| c.rate_at(hi)).collect();
    let lower: Vec<f64> = channels.iter().map(|c| c.rate_at(lo)).collect();
    let slack = budget - upper.iter().sum::<f64>();
    let room: f64 = lower.iter().zip(&upper).map(|(l, u)| l - u).sum();
    let rates = if room > 0.0 && slack > 0.0 {
        let frac = (slack / room).min(1.0);
        upper.iter().zip(&lower).map(|(u, l)| u + frac * (l - u)).collect()
    } else {
        upper
    };
    Ok(finish(rates, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// Checks the water-filling optimality conditions on `result`.
pub fn verify_kkt(channels: &[Channel], result: &AllocationResult, tol: f64) -> KktReport {
    let mut violations = Vec::new();
    let nu = result.water_level;
    if channels.len() != result.rates.len() {
        violations.push(format!(
            "{} channels but {} rates",
            channels.len(),
            result.rates.len()
        ));
        return KktReport { ok: false, violations };
    }
    let used: f64 = result.rates.iter().map(|r| r.1).sum();
    if used > result.budget + 1e-9 {
        violations.push(format!("budget exceeded: {used} > {}", result.budget));
    }
    if nu < 0.0 {
        violations.push(format!("negative water level {nu}"));
    }
    if nu > tol && (used - result.budget).abs() > 1e-6 * result.budget.max(1.0) {
        violations.push(format!(
            "complementary slackness: water level {nu} > 0 but only {used} of {} allocated",
            result.budget
        ));
    }
    for (c, (_, r)) in channels.iter().zip(&result.rates) {
        let r = *r;
        if r < -1e-12 {
            violations.push(format!("{}: negative rate {r}", c.id));
        } else if r > 1e-9 {
            if r > c.cap() + 1e-9 {
                violations.push(format!("{}: rate {r} above cap {}", c.id, c.cap()));
            } else if r >= c.cap() - 1e-9 {
                // saturated: the cap binds, utility may sit above the level
                if c.curve.value(c.cap().min(r)) < nu - tol {
                    violations.push(format!("{}: saturated below water level", c.id));
                }
            } else {
                let u = c.utility(r);
                if (u - nu).abs() > tol {
                    violations.push(format!(
                        "{}: active channel marginal utility {u} differs from water level {nu}",
                        c.id
                    ));
                }
            }
        } else if c.utility(0.0) > nu + tol {
            violations.push(format!(
                "{}: inactive channel has utility {} above water level {nu}",
                c.id,
                c.utility(0.0)
            ));
        }
    }
    KktReport { ok: violations.is_empty(), violations }
}

/// Parses a channel list: one channel per line,
/// `<id> <family> <params...> [max=<rate>] [kind=aib|xib]`, where family is
/// `reciprocal <a>`, `exponential <a> <b>` or `tabulated <r:u>...`.
/// Commas count as whitespace and `#` starts a comment.
pub fn parse_channels(text: &str) -> Result<Vec<Channel>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").replace(',', " ");
        let mut fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno + 1, msg };
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad number {s:?}")))
        };
        let mut max_rate = None;
        let mut kind = ChannelKind::Aib;
        let mut rest = Vec::new();
        for f in fields.drain(..) {
            if let Some(v) = f.strip_prefix("max=") {
                max_rate = Some(num(v)?);
            } else if let Some(v) = f.strip_prefix("kind=") {
                kind = match v {
                    "aib" => ChannelKind::Aib,
                    "xib" => ChannelKind::Xib,
                    other => return Err(err(format!("unknown kind {other:?}"))),
                };
            } else {
                rest.push(f);
            }
        }
        if rest.len() < 2 {
            return Err(err("expected `<id> <family> <params...>`".into()));
        }
        let id = rest[0];
        if out.iter().any(|c: &Channel| c.id == id) {
            return Err(err(format!("duplicate channel id {id:?}")));
        }
        let params = &rest[2..];
        let curve = match rest[1] {
            "reciprocal" => match params {
                [a] => UtilityCurve::Reciprocal { a: num(a)? },
                _ => return Err(err("reciprocal takes one parameter".into())),
            },
            "exponential" => match params {
                [a, b] => UtilityCurve::Exponential { a: num(a)?, b: num(b)? },
                _ => return Err(err("exponential takes two parameters".into())),
            },
            "tabulated" => {
                let knots = params
                    .iter()
                    .map(|p| {
                        let (r, u) = p.split_once(':').ok_or_else(|| err(format!("bad knot {p:?}")))?;
                        Ok((num(r)?, num(u)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                UtilityCurve::Tabulated { knots }
            }
            other => return Err(err(format!("unknown family {other:?}"))),
        };
        let channel = Channel::new(id, kind, curve, max_rate).map_err(|e| err(e.to_string()))?;
        out.push(channel);
    }
    if out.is_empty() {
        return contract("channel file lists no channels");
    }
    Ok(out)
}

/// CSV rendering: one row per channel, then a summary row.
pub fn allocation_csv(channels: &[Channel], result: &AllocationResult, kkt: &KktReport) -> String {
    let mut s = String::from("id,kind,rate,marginal_utility,active\n");
    for (c, (_, r)) in channels.iter().zip(&result.rates) {
        let kind = match c.kind {
            ChannelKind::Aib => "aib",
            ChannelKind::Xib => "xib",
        };
        let _ = writeln!(s, "{},{},{},{},{}", c.id, kind, r, c.utility(*r), *r > 1e-9);
    }
    s.push_str("water_level,budget,budget_used,kkt_ok\n");
    let _ = writeln!(
        s,
        "{},{},{},{}",
        result.water_level, result.budget, result.budget_used, kkt.ok
    );
    s
}

/// Per-block multipliers with rate targets and a dual step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState<K: Ord> {
    pub multipliers: BTreeMap<K, f64>,
    pub targets: BTreeMap<K, f64>,
    pub step: f64,
}

impl<K: Ord + Clone> DualState<K> {
    pub fn new(targets: BTreeMap<K, f64>, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return contract("dual step must be positive");
        }
        if targets.values().any(|t| !(*t > 0.0)) {
            return contract("rate targets must be positive");
        }
        let multipliers = targets.keys().map(|k| (k.clone(), 0.0)).collect();
        Ok(Self { multipliers, targets, step })
    }
}

/// `lambda <- max(0, lambda + step * (measured - target))` per block.
pub fn dual_ascent_step<K: Ord + Clone>(
    state: &DualState<K>,
    measured_rates: &BTreeMap<K, f64>,
) -> Result<DualState<K>> {
    let keys_match = |m: &BTreeMap<K, f64>| {
        m.len() == state.targets.len() && m.keys().all(|k| state.targets.contains_key(k))
    };
    if !keys_match(measured_rates) || !keys_match(&state.multipliers) {
        return contract("measured rates, multipliers and targets must share keys");
    }
    let multipliers = state
        .multipliers
        .iter()
        .map(|(k, lam)| {
            let excess = measured_rates[k] - state.targets[k];
            (k.clone(), (lam + state.step * excess).max(0.0))
        })
        .collect();
    Ok(DualState { multipliers, targets: state.targets.clone(), step: state.step })
}
