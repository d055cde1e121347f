//! Tape-based reverse-mode automatic differentiation.
//!
//! [`Var`] is a `Copy` scalar that records every arithmetic operation on a
//! thread-local tape. A session is opened with [`Tape::session`]; inside it,
//! leaves are created with [`Var::leaf`] and [`Tape::gradient`] runs the
//! backward sweep. Values recorded in one session must not be used after the
//! next session starts, since the tape is cleared.
//!
//! Constants (values produced from literals) carry no tape entry, so code that
//! mixes parameters with fixed data only records the parameter-dependent part.

use num_traits::{Float, FloatConst, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};
use std::cell::RefCell;
use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

const CONST: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    da: f64,
    b: u32,
    db: f64,
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = RefCell::new(Vec::with_capacity(1 << 16));
}

fn push(node: Node) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let idx = t.len();
        assert!(idx < CONST as usize, "autodiff tape overflow");
        t.push(node);
        idx as u32
    })
}

/// Handle to the thread-local tape.
pub struct Tape;

impl Tape {
    /// Clears the tape, runs `f`, and clears the tape again.
    pub fn session<R>(f: impl FnOnce() -> R) -> R {
        TAPE.with(|t| t.borrow_mut().clear());
        let out = f();
        TAPE.with(|t| t.borrow_mut().clear());
        out
    }

    /// Number of recorded nodes on this thread's tape.
    pub fn len() -> usize {
        TAPE.with(|t| t.borrow().len())
    }

    /// Backward sweep from `output`; returns d(output)/d(wrt[i]) for each leaf.
    pub fn gradient(output: Var, wrt: &[Var]) -> Vec<f64> {
        if output.idx == CONST {
            return vec![0.0; wrt.len()];
        }
        TAPE.with(|t| {
            let t = t.borrow();
            let mut adj = vec![0.0; output.idx as usize + 1];
            adj[output.idx as usize] = 1.0;
            for i in (0..=output.idx as usize).rev() {
                let g = adj[i];
                if g == 0.0 {
                    continue;
                }
                let n = t[i];
                if n.a != CONST {
                    adj[n.a as usize] += n.da * g;
                }
                if n.b != CONST {
                    adj[n.b as usize] += n.db * g;
                }
            }
            wrt.iter()
                .map(|v| {
                    if v.idx == CONST || v.idx as usize >= adj.len() {
                        0.0
                    } else {
                        adj[v.idx as usize]
                    }
                })
                .collect()
        })
    }
}

/// Scalar that records its computation history for reverse-mode gradients.
#[derive(Clone, Copy)]
pub struct Var {
    val: f64,
    idx: u32,
}

impl Var {
    /// An independent variable on the current tape.
    pub fn leaf(val: f64) -> Self {
        let idx = push(Node {
            a: CONST,
            da: 0.0,
            b: CONST,
            db: 0.0,
        });
        Var { val, idx }
    }

    /// A value with no derivative information.
    pub const fn constant(val: f64) -> Self {
        Var { val, idx: CONST }
    }

    pub fn val(self) -> f64 {
        self.val
    }

    pub fn is_constant(self) -> bool {
        self.idx == CONST
    }

    fn unary(self, val: f64, d: f64) -> Self {
        if self.idx == CONST {
            return Var::constant(val);
        }
        let idx = push(Node {
            a: self.idx,
            da: d,
            b: CONST,
            db: 0.0,
        });
        Var { val, idx }
    }

    fn binary(self, other: Var, val: f64, da: f64, db: f64) -> Self {
        match (self.idx == CONST, other.idx == CONST) {
            (true, true) => Var::constant(val),
            (false, true) => self.unary(val, da),
            (true, false) => other.unary(val, db),
            (false, false) => {
                let idx = push(Node {
                    a: self.idx,
                    da,
                    b: other.idx,
                    db,
                });
                Var { val, idx }
            }
        }
    }
}

impl Default for Var {
    fn default() -> Self {
        Var::constant(0.0)
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == CONST {
            write!(f, "Var({})", self.val)
        } else {
            write!(f, "Var({} @{})", self.val, self.idx)
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.val, f)
    }
}

impl PartialEq for Var {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, rhs: Var) -> Var {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, rhs: Var) -> Var {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, rhs: Var) -> Var {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Rem for Var {
    type Output = Var;
    fn rem(self, rhs: Var) -> Var {
        let r = self.val % rhs.val;
        self.binary(rhs, r, 1.0, -(self.val / rhs.val).trunc())
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl $tr for Var {
            fn $m(&mut self, rhs: Var) {
                *self = *self $op rhs;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);

impl Zero for Var {
    fn zero() -> Self {
        Var::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.val == 0.0
    }
}

impl One for Var {
    fn one() -> Self {
        Var::constant(1.0)
    }
}

impl Num for Var {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Var::constant)
    }
}

impl ToPrimitive for Var {
    fn to_i64(&self) -> Option<i64> {
        self.val.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.val.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.val)
    }
}

impl NumCast for Var {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Var::constant)
    }
}

impl FromPrimitive for Var {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Var::constant(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Var::constant(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Var::constant(n))
    }
}

macro_rules! float_consts {
    ($($name:ident),*) => {
        impl FloatConst for Var {
            $(fn $name() -> Self { Var::constant(std::f64::consts::$name) })*
        }
    };
}
float_consts!(
    E, FRAC_1_PI, FRAC_1_SQRT_2, FRAC_2_PI, FRAC_2_SQRT_PI, FRAC_PI_2, FRAC_PI_3, FRAC_PI_4,
    FRAC_PI_6, FRAC_PI_8, LN_10, LN_2, LOG10_E, LOG2_E, PI, SQRT_2
);

impl Float for Var {
    fn nan() -> Self {
        Var::constant(f64::NAN)
    }
    fn infinity() -> Self {
        Var::constant(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Var::constant(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Var::constant(-0.0)
    }
    fn min_value() -> Self {
        Var::constant(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Var::constant(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Var::constant(f64::EPSILON)
    }
    fn max_value() -> Self {
        Var::constant(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.val.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.val.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.val.is_finite()
    }
    fn is_normal(self) -> bool {
        self.val.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.val.classify()
    }
    // Piecewise-constant functions have zero derivative almost everywhere.
    fn floor(self) -> Self {
        Var::constant(self.val.floor())
    }
    fn ceil(self) -> Self {
        Var::constant(self.val.ceil())
    }
    fn round(self) -> Self {
        Var::constant(self.val.round())
    }
    fn trunc(self) -> Self {
        Var::constant(self.val.trunc())
    }
    fn fract(self) -> Self {
        self.unary(self.val.fract(), 1.0)
    }
    fn abs(self) -> Self {
        let s = if self.val < 0.0 { -1.0 } else { 1.0 };
        self.unary(self.val.abs(), s)
    }
    fn signum(self) -> Self {
        Var::constant(self.val.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.val.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.val.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = 1.0 / self.val;
        self.unary(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Var::constant(1.0);
        }
        self.unary(self.val.powi(n), n as f64 * self.val.powi(n - 1))
    }
    fn powf(self, n: Self) -> Self {
        let v = self.val.powf(n.val);
        let da = n.val * self.val.powf(n.val - 1.0);
        let db = if self.val > 0.0 { v * self.val.ln() } else { 0.0 };
        self.binary(n, v, da, db)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.val.exp2();
        self.unary(e, e * std::f64::consts::LN_2)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.unary(self.val.log2(), 1.0 / (self.val * std::f64::consts::LN_2))
    }
    fn log10(self) -> Self {
        self.unary(self.val.log10(), 1.0 / (self.val * std::f64::consts::LN_10))
    }
    fn max(self, other: Self) -> Self {
        if self.val >= other.val || other.val.is_nan() {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self.val <= other.val || other.val.is_nan() {
            self
        } else {
            other
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.val <= other.val {
            Var::constant(0.0)
        } else {
            self - other
        }
    }
    fn cbrt(self) -> Self {
        let c = self.val.cbrt();
        self.unary(c, 1.0 / (3.0 * c * c))
    }
    fn hypot(self, other: Self) -> Self {
        let h = self.val.hypot(other.val);
        self.binary(other, h, self.val / h, other.val / h)
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn tan(self) -> Self {
        let t = self.val.tan();
        self.unary(t, 1.0 + t * t)
    }
    fn asin(self) -> Self {
        self.unary(self.val.asin(), 1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn acos(self) -> Self {
        self.unary(self.val.acos(), -1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn atan(self) -> Self {
        self.unary(self.val.atan(), 1.0 / (1.0 + self.val * self.val))
    }
    fn atan2(self, other: Self) -> Self {
        let r2 = self.val * self.val + other.val * other.val;
        self.binary(
            other,
            self.val.atan2(other.val),
            other.val / r2,
            -self.val / r2,
        )
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.unary(self.val.exp_m1(), self.val.exp())
    }
    fn ln_1p(self) -> Self {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
    fn sinh(self) -> Self {
        self.unary(self.val.sinh(), self.val.cosh())
    }
    fn cosh(self) -> Self {
        self.unary(self.val.cosh(), self.val.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn asinh(self) -> Self {
        self.unary(self.val.asinh(), 1.0 / (self.val * self.val + 1.0).sqrt())
    }
    fn acosh(self) -> Self {
        self.unary(self.val.acosh(), 1.0 / (self.val * self.val - 1.0).sqrt())
    }
    fn atanh(self) -> Self {
        self.unary(self.val.atanh(), 1.0 / (1.0 - self.val * self.val))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.val.integer_decode()
    }
}

impl crate::real::Real for Var {}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn unary_derivatives_match_finite_differences() {
        type F = fn(Var) -> Var;
        let cases: Vec<(F, fn(f64) -> f64, f64)> = vec![
            (|v| v.sin(), f64::sin, 0.7),
            (|v| v.cos(), f64::cos, 0.7),
            (|v| v.tan(), f64::tan, 0.3),
            (|v| v.exp(), f64::exp, -0.4),
            (|v| v.ln(), f64::ln, 2.5),
            (|v| v.sqrt(), f64::sqrt, 3.0),
            (|v| v.tanh(), f64::tanh, 0.2),
            (|v| v.acos(), f64::acos, 0.4),
            (|v| v.asin(), f64::asin, -0.4),
            (|v| v.atan(), f64::atan, 1.5),
            (|v| v.recip(), f64::recip, 1.7),
            (|v| v.powi(3), |x| x.powi(3), 1.3),
            (|v| v.ln_1p(), f64::ln_1p, 0.5),
            (|v| v.exp_m1(), f64::exp_m1, 0.5),
            (|v| v.cbrt(), f64::cbrt, 2.0),
        ];
        for (fv, ff, x) in cases {
            let g = Tape::session(|| {
                let v = Var::leaf(x);
                Tape::gradient(fv(v), &[v])[0]
            });
            let expect = fd(ff, x);
            assert!((g - expect).abs() <= 1e-7 * expect.abs().max(1.0), "{g} vs {expect}");
        }
    }

    #[test]
    fn binary_ops_and_fan_out() {
        let (val, g) = Tape::session(|| {
            let x = Var::leaf(1.5);
            let y = Var::leaf(-0.5);
            let z = x * y + x / (y - Var::constant(2.0)) + x.atan2(y) + x.hypot(y);
            (z.val(), Tape::gradient(z, &[x, y]))
        });
        let f = |x: f64, y: f64| x * y + x / (y - 2.0) + x.atan2(y) + x.hypot(y);
        assert!((val - f(1.5, -0.5)).abs() < 1e-15);
        let gx = fd(|x| f(x, -0.5), 1.5);
        let gy = fd(|y| f(1.5, y), -0.5);
        assert!((g[0] - gx).abs() < 1e-8);
        assert!((g[1] - gy).abs() < 1e-8);
    }

    #[test]
    fn constants_do_not_touch_the_tape() {
        Tape::session(|| {
            let a = Var::constant(2.0) * Var::constant(3.0) + Var::constant(1.0).sin();
            assert!(a.is_constant());
            assert_eq!(Tape::len(), 0);
        });
    }

    #[test]
    fn unrelated_leaf_has_zero_gradient() {
        let g = Tape::session(|| {
            let x = Var::leaf(1.0);
            let y = Var::leaf(2.0);
            let z = x * x;
            Tape::gradient(z, &[x, y])
        });
        assert_eq!(g, vec![2.0, 0.0]);
    }
}
