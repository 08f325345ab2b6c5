//! BF16 scalar arithmetic and binary64 reference evaluation.
//!
//! Every compute element in the simulator (DRAM-PIM MAC lanes, SRAM-PIM
//! macros, router ALUs) operates on [`Bf16`]. Binary operations are carried
//! out in binary32 and rounded back to BF16 with round-to-nearest-even.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A bfloat16 value stored as its raw bit pattern.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const NEG_ZERO: Bf16 = Bf16(0x8000);
    pub const ONE: Bf16 = Bf16(0x3F80);
    pub const NEG_ONE: Bf16 = Bf16(0xBF80);
    pub const INFINITY: Bf16 = Bf16(0x7F80);
    pub const NEG_INFINITY: Bf16 = Bf16(0xFF80);
    pub const NAN: Bf16 = Bf16(0x7FC0);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round a binary32 value to the nearest BF16, ties to even.
    pub fn from_f32(value: f32) -> Self {
        let bits = value.to_bits();
        if value.is_nan() {
            // keep sign and top payload bits, force quiet
            return Bf16(((bits >> 16) as u16) | 0x0040);
        }
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb);
        Bf16((rounded >> 16) as u16)
    }

    /// Convert a binary64 value by way of binary32.
    pub fn from_f64(value: f64) -> Self {
        Self::from_f32(value as f32)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.to_f32() as f64
    }

    pub fn is_nan(self) -> bool {
        (self.0 & 0x7FFF) > 0x7F80
    }

    pub fn is_infinite(self) -> bool {
        (self.0 & 0x7FFF) == 0x7F80
    }

    pub fn is_finite(self) -> bool {
        (self.0 & 0x7F80) != 0x7F80
    }

    pub fn is_zero(self) -> bool {
        (self.0 & 0x7FFF) == 0
    }

    pub fn neg(self) -> Self {
        Bf16(self.0 ^ 0x8000)
    }

    /// Distance between `self` and the next representable value away from zero.
    pub fn ulp(self) -> f64 {
        let exp = ((self.0 >> 7) & 0xFF) as i32;
        let e = if exp == 0 { 1 } else { exp };
        2f64.powi(e - 127 - 7)
    }

    pub fn add(self, rhs: Bf16) -> Bf16 {
        bf16_binop(BinOp::Add, self, rhs)
    }

    pub fn sub(self, rhs: Bf16) -> Bf16 {
        bf16_binop(BinOp::Sub, self, rhs)
    }

    pub fn mul(self, rhs: Bf16) -> Bf16 {
        bf16_binop(BinOp::Mul, self, rhs)
    }

    pub fn div(self, rhs: Bf16) -> Bf16 {
        bf16_binop(BinOp::Div, self, rhs)
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({} / {:#06x})", self.to_f32(), self.0)
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<f32> for Bf16 {
    fn from(v: f32) -> Self {
        Bf16::from_f32(v)
    }
}

impl From<Bf16> for f32 {
    fn from(v: Bf16) -> Self {
        v.to_f32()
    }
}

/// The four arithmetic operations a router ALU can apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub const ALL: [BinOp; 4] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div];

    /// 2-bit wire encoding.
    pub fn code(self) -> u8 {
        match self {
            BinOp::Add => 0,
            BinOp::Sub => 1,
            BinOp::Mul => 2,
            BinOp::Div => 3,
        }
    }

    pub fn from_code(code: u8) -> BinOp {
        match code & 0b11 {
            0 => BinOp::Add,
            1 => BinOp::Sub,
            2 => BinOp::Mul,
            _ => BinOp::Div,
        }
    }

    /// Assembly spelling (`+=`, `-=`, `*=`, `/=`).
    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "+=",
            BinOp::Sub => "-=",
            BinOp::Mul => "*=",
            BinOp::Div => "/=",
        }
    }

    pub fn parse(s: &str) -> Option<BinOp> {
        match s {
            "+=" | "+" | "add" => Some(BinOp::Add),
            "-=" | "-" | "sub" => Some(BinOp::Sub),
            "*=" | "*" | "mul" => Some(BinOp::Mul),
            "/=" | "/" | "div" => Some(BinOp::Div),
            _ => None,
        }
    }

    pub fn apply_f64(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// `a op b` computed in binary32, rounded to nearest-even BF16.
pub fn bf16_binop(op: BinOp, a: Bf16, b: Bf16) -> Bf16 {
    let (x, y) = (a.to_f32(), b.to_f32());
    let r = match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    Bf16::from_f32(r)
}

/// Accumulation precision of a MAC reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulate {
    #[default]
    F32,
    Bf16,
}

/// Dot product as executed by a MAC lane: BF16 products, accumulated at the
/// configured precision and rounded to BF16 at the end.
pub fn bf16_dot(a: &[Bf16], b: &[Bf16], acc: Accumulate) -> Bf16 {
    match acc {
        Accumulate::F32 => {
            let mut s = 0f32;
            for (x, y) in a.iter().zip(b) {
                s += x.to_f32() * y.to_f32();
            }
            Bf16::from_f32(s)
        }
        Accumulate::Bf16 => a
            .iter()
            .zip(b)
            .fold(Bf16::ZERO, |s, (x, y)| s.add(x.mul(*y))),
    }
}

/// Scalar expression tree evaluated in binary64; the independent oracle for
/// kernel and router computations.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Index into the input slice.
    Var(usize),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Sqrt(Box<Expr>),
}

impl Expr {
    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn constant(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn exp(a: Expr) -> Expr {
        Expr::Exp(Box::new(a))
    }

    pub fn sqrt(a: Expr) -> Expr {
        Expr::Sqrt(Box::new(a))
    }

    /// Horner form of the order-`n` Taylor polynomial of `exp` around zero.
    pub fn taylor_exp(x: Expr, order: u32) -> Expr {
        let mut acc = Expr::Const(1.0);
        for k in (1..=order).rev() {
            let t = Expr::bin(BinOp::Mul, acc, x.clone());
            let t = Expr::bin(BinOp::Div, t, Expr::Const(k as f64));
            acc = Expr::bin(BinOp::Add, t, Expr::Const(1.0));
        }
        acc
    }
}

/// Evaluate an expression tree in binary64 (IEEE semantics, so `x/0 = inf`).
pub fn oracle_eval(expr: &Expr, inputs: &[f64]) -> f64 {
    match expr {
        Expr::Const(v) => *v,
        Expr::Var(i) => inputs[*i],
        Expr::Bin(op, a, b) => op.apply_f64(oracle_eval(a, inputs), oracle_eval(b, inputs)),
        Expr::Exp(a) => oracle_eval(a, inputs).exp(),
        Expr::Sqrt(a) => oracle_eval(a, inputs).sqrt(),
    }
}

/// Evaluate an expression with every arithmetic node rounded to BF16, in the
/// same operation order as the tree. `exp`/`sqrt` nodes are evaluated in
/// binary64 and rounded.
pub fn bf16_eval(expr: &Expr, inputs: &[Bf16]) -> Bf16 {
    match expr {
        Expr::Const(v) => Bf16::from_f64(*v),
        Expr::Var(i) => inputs[*i],
        Expr::Bin(op, a, b) => bf16_binop(*op, bf16_eval(a, inputs), bf16_eval(b, inputs)),
        Expr::Exp(a) => Bf16::from_f64(bf16_eval(a, inputs).to_f64().exp()),
        Expr::Sqrt(a) => Bf16::from_f64(bf16_eval(a, inputs).to_f64().sqrt()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(v: f32) -> Bf16 {
        Bf16::from_f32(v)
    }

    #[test]
    fn basic_adds() {
        assert_eq!(b(1.0).add(b(1.0)), b(2.0));
        assert_eq!(b(0.2578125).add(b(0.5)).to_f32(), 0.7578125);
    }

    #[test]
    fn rounding_is_nearest_even() {
        // 1 + 2^-8 is exactly halfway between 1.0 and 1 + 2^-7: ties to even -> 1.0
        assert_eq!(Bf16::from_f32(1.0 + 2f32.powi(-8)), Bf16::ONE);
        // 1 + 3*2^-8 is halfway between 1+2^-7 (odd) and 1+2^-6 (even)
        assert_eq!(Bf16::from_f32(1.0 + 3.0 * 2f32.powi(-8)).to_f32(), 1.0 + 2f32.powi(-6));
        // just above halfway rounds up
        assert_eq!(
            Bf16::from_f32(1.0 + 2f32.powi(-8) + 2f32.powi(-20)).to_f32(),
            1.0 + 2f32.powi(-7)
        );
        assert_eq!(Bf16::from_f32(f32::MAX), Bf16::INFINITY);
    }

    #[test]
    fn special_values_flow_through() {
        assert!(b(1.0).div(Bf16::ZERO).is_infinite());
        assert!(Bf16::ZERO.div(Bf16::ZERO).is_nan());
        assert!(Bf16::NAN.add(b(1.0)).is_nan());
        assert!(Bf16::from_f32(f32::NAN).is_nan());
        assert_eq!(Bf16::INFINITY.add(b(1.0)), Bf16::INFINITY);
    }

    #[test]
    fn subnormals_are_kept() {
        let tiny = Bf16::from_bits(0x0001);
        assert!(tiny.to_f32() > 0.0);
        assert_eq!(tiny.add(Bf16::ZERO), tiny);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_eval(&Expr::exp(Expr::constant(0.0)), &[]), 1.0);
        assert_eq!(oracle_eval(&Expr::sqrt(Expr::constant(4.0)), &[]), 2.0);
        let t = oracle_eval(&Expr::taylor_exp(Expr::var(0), 6), &[1.0]);
        // independent: direct power-series sum
        let direct: f64 = (0..=6).map(|k| 1.0 / (1..=k).product::<u64>() as f64).sum();
        assert!((t - direct).abs() < 1e-15);
        assert!((t - 2.718_055_555_555_555).abs() < 1e-12);
        let inf = oracle_eval(&Expr::bin(BinOp::Div, Expr::constant(1.0), Expr::constant(0.0)), &[]);
        assert!(inf.is_infinite());
    }

    #[test]
    fn opcode_roundtrip() {
        for op in BinOp::ALL {
            assert_eq!(BinOp::from_code(op.code()), op);
            assert_eq!(BinOp::parse(op.mnemonic()), Some(op));
        }
    }

    #[test]
    fn relative_error_bound_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for _ in 0..100_000 {
            let x = Bf16::from_bits(rng.gen());
            let y = Bf16::from_bits(rng.gen());
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            let op = BinOp::ALL[rng.gen_range(0..4)];
            let exact = op.apply_f64(x.to_f64(), y.to_f64());
            // skip overflow / underflow into the subnormal range
            if !exact.is_finite() || exact == 0.0 || exact.abs() < 1.2e-38 || exact.abs() > 3.3e38 {
                continue;
            }
            let got = bf16_binop(op, x, y).to_f64();
            let rel = ((got - exact) / exact).abs();
            assert!(rel <= 2f64.powi(-8), "{x:?} {op:?} {y:?}: {got} vs {exact}");
            checked += 1;
        }
        assert!(checked > 50_000);
    }

    proptest! {
        #[test]
        fn add_mul_commute(a in any::<u16>(), c in any::<u16>()) {
            let (x, y) = (Bf16::from_bits(a), Bf16::from_bits(c));
            prop_assume!(!x.is_nan() && !y.is_nan());
            prop_assert_eq!(x.add(y), y.add(x));
            prop_assert_eq!(x.mul(y), y.mul(x));
        }

        #[test]
        fn identities(a in any::<u16>()) {
            let x = Bf16::from_bits(a);
            prop_assume!(x.is_finite() && !x.is_zero());
            prop_assert_eq!(x.add(Bf16::ZERO), x);
            prop_assert_eq!(x.mul(Bf16::ONE), x);
        }
    }
}
