use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;

impl<F: Scalar> Graph<F> {
    /// Broadcasting `a + b`.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) + &*self.value(b);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) - &*self.value(b);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) * &*self.value(b);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) / &*self.value(b);
        self.binary(a, b, value, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -x);
        self.unary(a, value, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.unary(a, value, Op::Offset(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.value(a).mapv(F::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        let value = self.value(a).mapv(F::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        // NaN passes through so divergence stays visible downstream
        let value = self.value(a).mapv(|x| if x < F::zero() { F::zero() } else { x });
        self.unary(a, value, Op::Relu(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the range.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let value = self.value(a).mapv(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.unary(a, value, Op::Clamp(a, lo, hi))
    }

    /// `(1 - t) * a + t * b` for a fixed weight `t`.
    pub fn lerp(&self, a: Var, b: Var, t: F) -> Var {
        let wa = self.scale(a, F::one() - t);
        let wb = self.scale(b, t);
        self.add(wa, wb)
    }
}
