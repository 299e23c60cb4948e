"""Interaction kernels b(x, y) coupling the slow state x to a fast sample y.

Every kernel broadcasts over leading dimensions: ``x`` has shape ``(..., d)``,
``y`` has shape ``(..., d_fast)`` and the result has shape ``(..., d)``.
``vjp_y(x, y, g)`` returns ``sum_j g_j * db_j/dy``, the cotangent needed when
gradients flow back through samples ``y = f_theta(z)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass(frozen=True)
class SolventParams:
    N: int = 10
    d: int = 1
    a: float = 1.0
    kappa: float = 1.0
    gamma: float = 0.1
    zeta: float = 1.0

    def __post_init__(self):
        if int(self.N) < 1 or int(self.d) < 1:
            raise ConfigError(f"solvent needs N >= 1 and d >= 1, got N={self.N}, d={self.d}")
        for name in ("a", "kappa", "gamma", "zeta"):
            if not float(getattr(self, name)) > 0.0:
                raise ConfigError(f"solvent parameter {name} must be positive, got {getattr(self, name)}")

    @property
    def precision_eigenvalues(self):
        """(mean direction, orthogonal complement) eigenvalues of the Gibbs precision."""
        return self.gamma * self.kappa, self.gamma * (self.kappa + self.a * self.N)

    def marginal_variance(self):
        """Per-coordinate variance of a single particle under the Gibbs law."""
        lam_mean, lam_perp = self.precision_eigenvalues
        return 1.0 / (self.N * lam_mean) + (1.0 - 1.0 / self.N) / lam_perp


class DriftKernel:
    d = 1
    d_fast = 1

    def evaluate(self, x, y):
        raise NotImplementedError

    def vjp_y(self, x, y, g):
        raise NotImplementedError

    def to_config(self):
        raise NotImplementedError

    def __call__(self, x, y):
        return self.evaluate(x, y)

    def evaluate_with_pullback(self, x, y):
        """Return ``(b(x, y), pullback)`` where ``pullback(g) == vjp_y(x, y, g)``."""
        return self.evaluate(x, y), (lambda g: self.vjp_y(x, y, g))

    def apply(self, x, y):
        """Tape-aware evaluation, differentiable in ``y`` (``x`` is data)."""
        x = np.asarray(x.value if isinstance(x, ad.Tensor) else x, dtype=np.float64)
        y = ad.as_tensor(y)
        yv = y.value
        return ad.make_op(self.evaluate(x, yv), (y,),
                          lambda g: (ad.unbroadcast(self.vjp_y(x, yv, g), y.shape),))


class SolventGaussianForce(DriftKernel):
    """Tagged-particle force b(x, y) = -zeta * sum_i (x - y_i) exp(-|x - y_i|^2 / 2).

    ``y`` stacks N particle positions in R^d particle-major: ``y_i = y[i*d:(i+1)*d]``.
    The kernel is globally Lipschitz in y with constant ``zeta * sqrt(N)``.
    """

    def __init__(self, params):
        self.params = params
        self.d = params.d
        self.d_fast = params.N * params.d

    def _split(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ys = y.reshape(y.shape[:-1] + (self.params.N, self.d))
        u = x[..., None, :] - ys
        e = np.exp(-0.5 * np.sum(u * u, axis=-1))
        return u, e

    def _split_scalar(self, x, y):
        # d = 1: particles are the last axis, no per-particle vector axis
        u = np.asarray(x, float) - np.asarray(y, float)
        e = np.exp(-0.5 * (u * u))
        return u, e

    def evaluate(self, x, y):
        if self.d == 1:
            u, e = self._split_scalar(x, y)
            u *= e
            return -self.params.zeta * u.sum(axis=-1, keepdims=True)
        u, e = self._split(x, y)
        return -self.params.zeta * np.sum(u * e[..., None], axis=-2)

    def vjp_y(self, x, y, g):
        if self.d == 1:
            u, e = self._split_scalar(x, y)
            u *= u
            np.subtract(1.0, u, out=u)
            u *= e
            u *= self.params.zeta * np.asarray(g, float)
            return u
        u, e = self._split(x, y)
        g = np.asarray(g, float)[..., None, :]
        ug = np.sum(u * g, axis=-1, keepdims=True)
        gy = self.params.zeta * e[..., None] * (g - u * ug)
        return gy.reshape(gy.shape[:-2] + (self.d_fast,))

    def evaluate_with_pullback(self, x, y):
        if self.d != 1:
            return DriftKernel.evaluate_with_pullback(self, x, y)
        u, e = self._split_scalar(x, y)
        zeta = self.params.zeta
        vals = -zeta * (u * e).sum(axis=-1, keepdims=True)

        def pullback(g):
            out = u * u
            np.subtract(1.0, out, out=out)
            out *= e
            out *= zeta * np.asarray(g, float)
            return out

        return vals, pullback

    def lipschitz_constant(self, x=None):
        return self.params.zeta * np.sqrt(self.params.N)

    def averaged_closed_form(self, x):
        """Exact average of the force under the Gibbs law (Gaussian particle marginals)."""
        x = np.asarray(x, float)
        v = self.params.marginal_variance()
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        scale = (1.0 + v) ** (-(self.d / 2.0 + 1.0)) * np.exp(-r2 / (2.0 * (1.0 + v)))
        return -self.params.zeta * self.params.N * x * scale

    def to_config(self):
        p = self.params
        return {"variant": "solvent", "N": p.N, "d": p.d, "a": p.a, "kappa": p.kappa,
                "gamma": p.gamma, "zeta": p.zeta}


class DoubleWellVariant(DriftKernel):
    """b(x, y) = (x - x^3) / (1 + x^2 + y1^2 + sin(1 + y2^2) + log(1 + y3^2) + y4^4).

    The denominator vanishes only when x = y1 = y3 = y4 = 0 and sin(1 + y2^2) = -1,
    a null set for the continuous fast laws used here.
    """

    d = 1
    d_fast = 4

    def _denominator(self, x, y):
        y1, y2, y3, y4 = (y[..., i] for i in range(4))
        return (1.0 + x[..., 0] ** 2 + y1 ** 2 + np.sin(1.0 + y2 ** 2)
                + np.log1p(y3 ** 2) + y4 ** 4)

    def evaluate(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        num = x[..., 0] - x[..., 0] ** 3
        return (num / self._denominator(x, y))[..., None]

    def vjp_y(self, x, y, g):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        num = x[..., 0] - x[..., 0] ** 3
        den = self._denominator(x, y)
        y1, y2, y3, y4 = (y[..., i] for i in range(4))
        d_den = np.stack([2.0 * y1, 2.0 * y2 * np.cos(1.0 + y2 ** 2),
                          2.0 * y3 / (1.0 + y3 ** 2), 4.0 * y4 ** 3], axis=-1)
        coef = -np.asarray(g, float)[..., 0] * num / den ** 2
        return coef[..., None] * d_den

    def to_config(self):
        return {"variant": "double_well"}


B0_KINDS = {
    "linear": (lambda x, c: c * x),
    "constant": (lambda x, c: c * np.ones_like(x)),
    "cubic": (lambda x, c: c * x ** 3),
}


class _Separable(DriftKernel):
    power = 1

    def __init__(self, d=1, b0="linear", coef=-1.0):
        if b0 not in B0_KINDS:
            raise ConfigError(f"unknown b0 kind {b0!r}; choose from {sorted(B0_KINDS)}")
        self.d = self.d_fast = int(d)
        self.b0 = b0
        self.coef = float(coef)

    def b0_values(self, x):
        return B0_KINDS[self.b0](np.asarray(x, float), self.coef)

    def evaluate(self, x, y):
        y = np.asarray(y, float)
        return self.b0_values(x) * y ** self.power

    def vjp_y(self, x, y, g):
        y = np.asarray(y, float)
        dy = self.power * y ** (self.power - 1)
        return np.asarray(g, float) * self.b0_values(x) * dy


class SeparableLinear(_Separable):
    """b(x, y) = b0(x) * y coordinatewise; the averaged drift is b0(x) * E[y]."""

    power = 1

    def to_config(self):
        return {"variant": "separable_linear", "d": self.d, "b0": self.b0, "coef": self.coef}


class SeparableQuadratic(_Separable):
    """b(x, y) = b0(x) * y^2 coordinatewise; the averaged drift is b0(x) * E[y^2]."""

    power = 2

    def to_config(self):
        return {"variant": "separable_quadratic", "d": self.d, "b0": self.b0, "coef": self.coef}


# custom expressions -----------------------------------------------------------

_UNARY = {"neg": ad.neg, "exp": ad.exp, "log": ad.log, "log1p": ad.log1p, "sqrt": ad.sqrt,
          "square": ad.square, "tanh": ad.tanh, "sin": ad.sin, "cos": ad.cos,
          "softplus": ad.softplus, "relu": ad.relu}
_BINARY = {"+": ad.add, "-": ad.sub, "*": ad.mul, "/": ad.div}


def _tokenize(text):
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_expression(text):
    """Parse a prefix s-expression such as ``(* x0 (exp (neg (square y0))))``.

    Leaves are numbers, ``x<i>`` and ``y<j>``. Operators: ``+ - * /`` (two or
    more arguments for ``+`` and ``*``), ``^`` with a numeric exponent, and the
    unary functions ``neg exp log log1p sqrt square tanh sin cos softplus relu``.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise ConfigError("empty kernel expression")
    pos = 0

    def read():
        nonlocal pos
        if pos >= len(tokens):
            raise ConfigError(f"unexpected end of expression {text!r}")
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            if pos >= len(tokens):
                raise ConfigError(f"unexpected end of expression {text!r}")
            op = tokens[pos]
            pos += 1
            args = []
            while pos < len(tokens) and tokens[pos] != ")":
                args.append(read())
            if pos >= len(tokens):
                raise ConfigError(f"missing ')' in {text!r}")
            pos += 1
            return _check_node((op, *args), text)
        if tok == ")":
            raise ConfigError(f"unexpected ')' in {text!r}")
        return _leaf(tok, text)

    node = read()
    if pos != len(tokens):
        raise ConfigError(f"trailing tokens in {text!r}")
    return node


def _leaf(tok, text):
    if tok[0] in "xy" and tok[1:].isdigit():
        return (tok[0], int(tok[1:]))
    try:
        return ("const", float(tok))
    except ValueError:
        raise ConfigError(f"unknown symbol {tok!r} in {text!r}") from None


def _check_node(node, text):
    op, args = node[0], node[1:]
    if op in _UNARY and len(args) == 1:
        return node
    if op in ("+", "*") and len(args) >= 2:
        return node
    if op in ("-", "/") and len(args) == 2:
        return node
    if op == "^" and len(args) == 2 and args[1][0] == "const":
        return node
    raise ConfigError(f"bad use of operator {op!r} in {text!r}")


def _max_index(node, var):
    if node[0] == var:
        return node[1]
    if node[0] in ("x", "y", "const"):
        return -1
    return max((_max_index(a, var) for a in node[1:]), default=-1)


def _eval_node(node, x, y):
    op = node[0]
    if op == "const":
        return ad.Tensor(node[1])
    if op == "x":
        return ad.Tensor(x[..., node[1]])
    if op == "y":
        return ad.getitem(y, (Ellipsis, node[1]))
    args = [_eval_node(a, x, y) for a in node[1:]]
    if op in _UNARY:
        return _UNARY[op](args[0])
    if op == "^":
        return ad.power(args[0], node[2][1])
    out = args[0]
    for a in args[1:]:
        out = _BINARY[op](out, a)
    return out


class Custom(DriftKernel):
    """Kernel given by one prefix expression per output coordinate."""

    def __init__(self, expressions, d_fast):
        if isinstance(expressions, str):
            expressions = [expressions]
        self.expressions = list(expressions)
        self.trees = [parse_expression(e) for e in self.expressions]
        self.d = len(self.trees)
        self.d_fast = int(d_fast)
        if max(_max_index(t, "x") for t in self.trees) >= self.d:
            raise ConfigError(f"custom kernel refers to x beyond d={self.d}")
        if max(_max_index(t, "y") for t in self.trees) >= self.d_fast:
            raise ConfigError(f"custom kernel refers to y beyond d_fast={self.d_fast}")

    def _build(self, x, y):
        x = np.asarray(x, float)
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        cols = [ad.broadcast_to(_eval_node(t, x, y), shape) for t in self.trees]
        return ad.concat([ad.reshape(c, shape + (1,)) for c in cols], axis=-1)

    def evaluate(self, x, y):
        with ad.no_grad():
            return self._build(x, ad.Tensor(y)).value

    def vjp_y(self, x, y, g):
        yt = ad.Tensor(np.asarray(y, float), requires_grad=True)
        out = self._build(x, yt)
        (gy,) = ad.gradients(out, [yt], seed=np.broadcast_to(g, out.shape))
        return gy

    def to_config(self):
        return {"variant": "custom", "expressions": list(self.expressions), "d_fast": self.d_fast}


def kernel_from_config(cfg):
    cfg = dict(cfg)
    variant = cfg.pop("variant", None)
    try:
        if variant == "solvent":
            return SolventGaussianForce(SolventParams(**cfg))
        if variant == "double_well":
            if cfg:
                raise TypeError(f"unexpected keys {sorted(cfg)}")
            return DoubleWellVariant()
        if variant == "separable_linear":
            return SeparableLinear(**cfg)
        if variant == "separable_quadratic":
            return SeparableQuadratic(**cfg)
        if variant == "custom":
            return Custom(**cfg)
    except TypeError as exc:
        raise ConfigError(f"kernel {variant!r}: {exc}") from None
    raise ConfigError(f"unknown kernel variant {variant!r}")
