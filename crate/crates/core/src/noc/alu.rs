//! Curry ALU: a one-operand ALU whose right operand lives in a register.

use serde::{Deserialize, Serialize};

use crate::numerics::{bf16_binop, Bf16, BinOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurryAluState {
    pub arg_reg: Bf16,
    pub iter_arg: Bf16,
    pub iter_op: BinOp,
    pub iter_round: u16,
}

impl Default for CurryAluState {
    fn default() -> Self {
        CurryAluState {
            arg_reg: Bf16::ZERO,
            iter_arg: Bf16::ZERO,
            iter_op: BinOp::Add,
            iter_round: 0,
        }
    }
}

/// `out = input_val <op> arg_reg`. With `wr_reg` the result is kept in
/// `arg_reg`; with `iter_tag` the register is then updated by
/// `iter_op`/`iter_arg` and one round is consumed. Once rounds run out,
/// iteration-tagged inputs pass through untouched.
pub fn alu_apply(
    state: CurryAluState,
    input_op: BinOp,
    input_val: Bf16,
    wr_reg: bool,
    iter_tag: bool,
) -> (CurryAluState, Bf16) {
    if iter_tag && state.iter_round == 0 {
        return (state, input_val);
    }
    let mut s = state;
    let out = bf16_binop(input_op, input_val, s.arg_reg);
    if wr_reg {
        s.arg_reg = out;
    }
    if iter_tag {
        s.arg_reg = bf16_binop(s.iter_op, s.arg_reg, s.iter_arg);
        s.iter_round -= 1;
    }
    (s, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reg(v: f32) -> CurryAluState {
        CurryAluState {
            arg_reg: Bf16::from_f32(v),
            ..Default::default()
        }
    }

    #[test]
    fn add_keeps_register() {
        let (s, out) = alu_apply(reg(2.0), BinOp::Add, Bf16::from_f32(5.0), false, false);
        assert_eq!(out.to_f32(), 7.0);
        assert_eq!(s.arg_reg.to_f32(), 2.0);
    }

    #[test]
    fn iteration_updates_register() {
        let st = CurryAluState {
            iter_arg: Bf16::ONE,
            iter_op: BinOp::Add,
            iter_round: 3,
            ..reg(2.0)
        };
        let (s, _) = alu_apply(st, BinOp::Add, Bf16::ZERO, false, true);
        assert_eq!(s.arg_reg.to_f32(), 3.0);
        assert_eq!(s.iter_round, 2);
    }

    #[test]
    fn exhausted_rounds_pass_through() {
        let (s, out) = alu_apply(reg(2.0), BinOp::Mul, Bf16::from_f32(9.0), true, true);
        assert_eq!(out.to_f32(), 9.0);
        assert_eq!(s, reg(2.0));
    }

    #[test]
    fn division_by_zero_register_is_inf() {
        let (_, out) = alu_apply(reg(0.0), BinOp::Div, Bf16::ONE, false, false);
        assert!(out.is_infinite());
    }

    proptest! {
        #[test]
        fn mul_by_one_identity(bits in any::<u16>()) {
            let x = Bf16::from_bits(bits);
            prop_assume!(x.is_finite());
            let (_, out) = alu_apply(reg(1.0), BinOp::Mul, x, false, false);
            prop_assert_eq!(out, x);
        }
    }
}
