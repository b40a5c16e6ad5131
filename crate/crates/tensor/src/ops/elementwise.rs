use crate::error::{Result, TensorError};
use crate::tape::Var;

type BinaryFn = fn(f64, f64) -> f64;
type UnaryFn = fn(f64) -> f64;
/// Derivative of a unary op given its input and output.
type UnaryGrad = fn(f64, f64) -> f64;

enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64, _y: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: BinaryFn,
        da: BinaryFn,
        db: BinaryFn,
    ) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mode = if sa == sb {
            Broadcast::Same
        } else if self.numel() == 1 {
            Broadcast::LhsScalar
        } else if other.numel() == 1 {
            Broadcast::RhsScalar
        } else {
            return Err(TensorError::shape(op, &sa, &sb));
        };
        let (a, b) = (self.value(), other.value());
        let (out_shape, value): (Vec<usize>, Vec<f64>) = match mode {
            Broadcast::Same => (sa, a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()),
            Broadcast::LhsScalar => (sb, b.iter().map(|&y| f(a[0], y)).collect()),
            Broadcast::RhsScalar => (sa, a.iter().map(|&x| f(x, b[0])).collect()),
        };
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().record(&[self, other], out_shape, value, move |g| {
            let n = g.len();
            let at = |i: usize| if a.len() == 1 { a[0] } else { a[i] };
            let bt = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
            let ga = need_a.then(|| {
                let per: Vec<f64> = (0..n).map(|i| g[i] * da(at(i), bt(i))).collect();
                if a.len() == 1 && n != 1 {
                    vec![per.iter().sum()]
                } else {
                    per
                }
            });
            let gb = need_b.then(|| {
                let per: Vec<f64> = (0..n).map(|i| g[i] * db(at(i), bt(i))).collect();
                if b.len() == 1 && n != 1 {
                    vec![per.iter().sum()]
                } else {
                    per
                }
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise sum; shapes must be equal or one side a single element.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    fn unary(self, f: UnaryFn, df: UnaryGrad) -> Var<'t> {
        let x = self.value();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y_saved = std::rc::Rc::new(y.clone());
        self.tape().record(&[self], self.shape(), y, move |g| {
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y_saved.iter()))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, gelu_grad)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().iter().map(|v| v * c).collect();
        self.tape().record(&[self], self.shape(), value, move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().iter().map(|v| v + c).collect();
        self.tape()
            .record(&[self], self.shape(), value, |g| vec![Some(g.to_vec())])
    }
}
