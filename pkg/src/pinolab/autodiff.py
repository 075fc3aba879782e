"""Minimal reverse-mode differentiation over the tensor operations the
neural operator and its losses need.

Design notes:

* Define-by-run: every operation executes immediately and appends one node to
  an explicit :class:`Tape`; :func:`backward` walks the tape once in reverse.
* Values are numpy arrays, real float64 or complex complex128.  Gradients of
  complex values are stored as ``dL/dRe + 1j * dL/dIm`` (real and imaginary
  parts treated as independent reals).
* FFT primitives work on the full complex spectrum; under the package's
  normalization (unnormalized forward, 1/N inverse) the adjoint of the
  forward FFT is N times the inverse FFT and vice versa.
* The forward pass is never mutated by ``backward``.
"""
from __future__ import annotations

import numpy as np
import scipy.fft as _fft
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class MissingNodeError(RuntimeError):
    """backward() met a value whose producing node is not on this tape."""


class NumericFailureError(RuntimeError):
    """A function evaluation produced a non-finite value."""


class Var:
    """A tensor tracked by the tape."""

    __slots__ = ("values", "requires_grad", "_creator")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.requires_grad = bool(requires_grad)
        self._creator = None  # id of the tape that produced this Var, if any

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __float__(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Var(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _val(x):
    return x.values if isinstance(x, Var) else np.asarray(x)


def _sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _real_grad(g):
    return np.real(g) if np.iscomplexobj(g) else g


class Tape:
    """Ordered record of primitive operations; also the op namespace.

    Nodes are appended in execution order, so parents always precede
    children and one reverse sweep computes all gradients.
    """

    def __init__(self):
        self._nodes: list[tuple[Var, tuple, object]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Var, parents: tuple, vjp) -> Var:
        out._creator = id(self)
        self._nodes.append((out, parents, vjp))
        return out

    # -- elementwise arithmetic ------------------------------------------

    def add(self, a, b) -> Var:
        av, bv = _val(a), _val(b)
        out = Var(av + bv)

        def vjp(g):
            return (_sum_to_shape(g, av.shape), _sum_to_shape(g, bv.shape))

        return self._record(out, (a, b), vjp)

    def sub(self, a, b) -> Var:
        av, bv = _val(a), _val(b)
        out = Var(av - bv)

        def vjp(g):
            return (_sum_to_shape(g, av.shape), _sum_to_shape(-g, bv.shape))

        return self._record(out, (a, b), vjp)

    def mul(self, a, b) -> Var:
        av, bv = _val(a), _val(b)
        out = Var(av * bv)

        def vjp(g):
            return (_sum_to_shape(g * bv, av.shape), _sum_to_shape(g * av, bv.shape))

        return self._record(out, (a, b), vjp)

    def neg(self, a) -> Var:
        out = Var(-_val(a))
        return self._record(out, (a,), lambda g: (-g,))

    def scale(self, a, c: float) -> Var:
        out = Var(_val(a) * c)
        return self._record(out, (a,), lambda g: (g * c,))

    def square(self, a) -> Var:
        av = _val(a)
        out = Var(av * av)
        return self._record(out, (a,), lambda g: (2.0 * av * g,))

    def absolute(self, a) -> Var:
        av = _val(a)
        out = Var(np.abs(av))
        sign = np.sign(av)  # subgradient 0 at kinks
        return self._record(out, (a,), lambda g: (g * sign,))

    # -- reductions -------------------------------------------------------

    def total(self, a) -> Var:
        av = _val(a)
        out = Var(np.asarray(av.sum()))

        def vjp(g):
            return (np.broadcast_to(g, av.shape).copy(),)

        return self._record(out, (a,), vjp)

    def mean(self, a) -> Var:
        av = _val(a)
        out = Var(np.asarray(av.mean()))
        inv = 1.0 / av.size

        def vjp(g):
            return (np.broadcast_to(g * inv, av.shape).copy(),)

        return self._record(out, (a,), vjp)

    # -- pointwise dense / activations -------------------------------------

    def affine(self, v, w, b=None) -> Var:
        """Per-grid-point dense map: (Cin, *sp) -> (Cout, *sp)."""
        vv, wv = _val(v), _val(w)
        spatial = vv.shape[1:]
        flat = vv.reshape(vv.shape[0], -1)
        out_values = wv @ flat
        if b is not None:
            bv = _val(b)
            out_values = out_values + bv[:, None]
        out = Var(out_values.reshape((wv.shape[0],) + spatial))

        def vjp(g):
            g2 = g.reshape(g.shape[0], -1)
            g_v = (wv.T @ g2).reshape(vv.shape)
            g_w = g2 @ flat.T
            grads = [g_v, g_w]
            if b is not None:
                grads.append(g2.sum(axis=1))
            return tuple(grads)

        parents = (v, w) if b is None else (v, w, b)
        return self._record(out, parents, vjp)

    def gelu(self, a) -> Var:
        av = _val(a)
        out = Var(gelu_value(av))
        return self._record(out, (a,), lambda g: (g * gelu_prime(av),))

    def gelu_grad(self, a) -> Var:
        """The derivative of gelu as a primitive (used by pointwise Jacobians)."""
        av = _val(a)
        out = Var(gelu_prime(av))
        return self._record(out, (a,), lambda g: (g * gelu_second(av),))

    def tanh(self, a) -> Var:
        t = np.tanh(_val(a))
        out = Var(t)
        return self._record(out, (a,), lambda g: (g * (1.0 - t * t),))

    def tanh_grad(self, a) -> Var:
        av = _val(a)
        t = np.tanh(av)
        out = Var(1.0 - t * t)
        return self._record(out, (a,), lambda g: (g * (-2.0 * t * (1.0 - t * t)),))

    # -- spectral ----------------------------------------------------------

    def fft(self, a, axes) -> Var:
        """Full-spectrum FFT of a real tensor over the given axes."""
        av = _val(a)
        axes = tuple(axes)
        out = Var(_fft.fftn(av, axes=axes))
        n = float(np.prod([av.shape[ax] for ax in axes]))

        def vjp(g):
            return (np.real(_fft.ifftn(g, axes=axes)) * n,)

        return self._record(out, (a,), vjp)

    def ifft_real(self, a, axes) -> Var:
        """Inverse FFT of a complex spectrum, real part."""
        av = _val(a)
        axes = tuple(axes)
        out = Var(_fft.ifftn(av, axes=axes).real)
        n = float(np.prod([av.shape[ax] for ax in axes]))

        def vjp(g):
            return (_fft.fftn(g, axes=axes) / n,)

        return self._record(out, (a,), vjp)

    def spectral_filter(self, a, mult: np.ndarray, axes) -> Var:
        """Apply a fixed complex multiplier in spectrum: real -> real."""
        av = _val(a)
        axes = tuple(axes)
        out = Var(_fft.ifftn(_fft.fftn(av, axes=axes) * mult, axes=axes).real)
        conj_mult = np.conj(mult)

        def vjp(g):
            return (
                _fft.ifftn(_fft.fftn(g, axes=axes) * conj_mult, axes=axes).real,
            )

        return self._record(out, (a,), vjp)

    def rfft(self, a, axes) -> Var:
        """Hermitian-reduced FFT of a real tensor (last listed axis halved)."""
        av = _val(a)
        axes = tuple(axes)
        out = Var(_fft.rfftn(av, axes=axes))
        n = float(np.prod([av.shape[ax] for ax in axes]))
        last_ax = axes[-1]
        full_last = av.shape[last_ax]

        def vjp(g):
            # adjoint of the restriction to the reduced layout: zero-pad the
            # dropped half, then N times the real part of the inverse FFT
            shape = list(g.shape)
            shape[last_ax] = full_last
            buf = np.zeros(shape, dtype=np.complex128)
            sl = [slice(None)] * g.ndim
            sl[last_ax] = slice(0, g.shape[last_ax])
            buf[tuple(sl)] = g
            return (np.real(_fft.ifftn(buf, axes=axes)) * n,)

        return self._record(out, (a,), vjp)

    def irfft_real(self, a, s, axes) -> Var:
        """Inverse of the Hermitian-reduced FFT back to a real tensor.

        Self-conjugate columns of the reduced layout are assumed Hermitian
        (true for every producer in this package); the adjoint doubles the
        interior columns that represent conjugate pairs.
        """
        av = _val(a)
        axes = tuple(axes)
        s = tuple(s)
        out = Var(_fft.irfftn(av, s=s, axes=axes))
        n = float(np.prod(s))
        last_ax = axes[-1]
        weights = np.full(av.shape[last_ax], 2.0)
        weights[0] = 1.0
        if s[-1] % 2 == 0:
            weights[-1] = 1.0
        shape = [1] * av.ndim
        shape[last_ax] = av.shape[last_ax]
        weights = weights.reshape(shape)

        def vjp(g):
            return (_fft.rfftn(g, axes=axes) * weights / n,)

        return self._record(out, (a,), vjp)

    def spectral_multiply_reduced(self, spec, r, layout: "ModeLayout") -> Var:
        """spectral_multiply on the Hermitian-reduced layout (no mirrors;
        the inverse transform supplies the conjugate half)."""
        sv, rv = _val(spec), _val(r)
        c_out = rv.shape[-1]
        out_values = np.zeros((c_out,) + sv.shape[1:], dtype=np.complex128)
        col0 = sv[layout.col0_ix]
        r0 = rv[layout.r_col0_slice]
        r0s = 0.5 * (r0 + np.conj(layout.negate_r_modes(r0)))
        out_values[layout.col0_ix] = np.einsum("i...,...io->o...", col0, r0s)
        if layout.has_rest:
            rest = sv[layout.rest_ix]
            r1 = rv[layout.r_rest_slice]
            out_values[layout.rest_ix] = np.einsum("i...,...io->o...", rest, r1)
        out = Var(out_values)

        def vjp(g):
            g_spec = np.zeros_like(sv)
            g_r = np.zeros_like(rv)
            g_col0 = g[layout.col0_ix]
            g_spec[layout.col0_ix] = np.einsum(
                "o...,...io->i...", g_col0, np.conj(r0s)
            )
            g_r0s = np.einsum("i...,o...->...io", np.conj(col0), g_col0)
            g_r[layout.r_col0_slice] = 0.5 * (
                g_r0s + np.conj(layout.negate_r_modes(g_r0s))
            )
            if layout.has_rest:
                g_rest = g[layout.rest_ix]
                g_spec[layout.rest_ix] = np.einsum(
                    "o...,...io->i...", g_rest, np.conj(r1)
                )
                g_r[layout.r_rest_slice] = np.einsum(
                    "i...,o...->...io", np.conj(rest), g_rest
                )
            return (g_spec, g_r)

        return self._record(out, (spec, r), vjp)

    def spectral_filter_bank(self, a, mults, axes) -> list[Var]:
        """Several fixed spectral multipliers sharing batched transforms.

        The multipliers are stacked on a new leading axis so one forward and
        one inverse transform serve the whole bank.
        """
        av = _val(a)
        axes = tuple(axes)
        shifted = tuple(ax + 1 for ax in axes)
        spec = _fft.fftn(av, axes=axes)
        stacked = np.stack([spec * mult for mult in mults])
        values = _fft.ifftn(stacked, axes=shifted).real
        outs = []
        for i, mult in enumerate(mults):
            out = Var(values[i])
            conj_mult = np.conj(mult)

            def vjp(g, conj_mult=conj_mult):
                return (
                    _fft.ifftn(
                        _fft.fftn(g, axes=axes) * conj_mult, axes=axes
                    ).real,
                )

            outs.append(self._record(out, (a,), vjp))
        return outs

    def spectral_multiply(self, spec, r, layout: "ModeLayout") -> Var:
        """Channel-mixing weights applied on retained low modes.

        ``spec`` is a full complex spectrum shaped (Cin, *spatial); ``r`` has
        shape (*mode extents, Cin, Cout).  The application is Hermitian-
        closed: conjugate weights act on mirrored modes, and on the zero
        column of the (Hermitian-reduced) last axis the weights are
        symmetrized pairwise, so Hermitian inputs map exactly to Hermitian
        outputs and every stored weight scalar acts on the output (the one
        exception, the imaginary part of the mean-mode weight, is exactly
        inert).
        """
        sv, rv = _val(spec), _val(r)
        c_out = rv.shape[-1]
        out_values = np.zeros((c_out,) + sv.shape[1:], dtype=np.complex128)
        col0 = sv[layout.col0_ix]
        r0 = rv[layout.r_col0_slice]
        r0s = 0.5 * (r0 + np.conj(layout.negate_r_modes(r0)))
        out_values[layout.col0_ix] = np.einsum("i...,...io->o...", col0, r0s)
        if layout.has_rest:
            rest = sv[layout.rest_ix]
            mir = sv[layout.mir_ix]
            r1 = rv[layout.r_rest_slice]
            out_values[layout.rest_ix] = np.einsum("i...,...io->o...", rest, r1)
            out_values[layout.mir_ix] = np.einsum(
                "i...,...io->o...", mir, np.conj(r1)
            )
        out = Var(out_values)

        def vjp(g):
            g_spec = np.zeros_like(sv)
            g_r = np.zeros_like(rv)
            g_col0 = g[layout.col0_ix]
            g_spec[layout.col0_ix] = np.einsum(
                "o...,...io->i...", g_col0, np.conj(r0s)
            )
            g_r0s = np.einsum("i...,o...->...io", np.conj(col0), g_col0)
            g_r[layout.r_col0_slice] = 0.5 * (
                g_r0s + np.conj(layout.negate_r_modes(g_r0s))
            )
            if layout.has_rest:
                g_rest = g[layout.rest_ix]
                g_mir = g[layout.mir_ix]
                g_spec[layout.rest_ix] = np.einsum(
                    "o...,...io->i...", g_rest, np.conj(r1)
                )
                g_spec[layout.mir_ix] = np.einsum("o...,...io->i...", g_mir, r1)
                g_r[layout.r_rest_slice] = np.einsum(
                    "i...,o...->...io", np.conj(rest), g_rest
                ) + np.einsum("i...,o...->...io", mir, np.conj(g_mir))
            return (g_spec, g_r)

        return self._record(out, (spec, r), vjp)

    # -- shape ops ----------------------------------------------------------

    def take_index(self, a, axis: int, index: int) -> Var:
        av = _val(a)
        out = Var(np.take(av, index, axis=axis))

        def vjp(g):
            buf = np.zeros_like(av)
            sl = [slice(None)] * av.ndim
            sl[axis] = index
            buf[tuple(sl)] = g
            return (buf,)

        return self._record(out, (a,), vjp)

    def slice_axis(self, a, axis: int, start, stop) -> Var:
        av = _val(a)
        sl = [slice(None)] * av.ndim
        sl[axis] = slice(start, stop)
        sl = tuple(sl)
        out = Var(av[sl])

        def vjp(g):
            buf = np.zeros_like(av)
            buf[sl] = g
            return (buf,)

        return self._record(out, (a,), vjp)

    def concat(self, parts: list, axis: int = 0) -> Var:
        values = [_val(p) for p in parts]
        out = Var(np.concatenate(values, axis=axis))
        sizes = [v.shape[axis] for v in values]

        def vjp(g):
            grads = []
            start = 0
            for size in sizes:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + size)
                grads.append(g[tuple(sl)])
                start += size
            return tuple(grads)

        return self._record(out, tuple(parts), vjp)

    def matrix_apply(self, a, matrix: np.ndarray, axis: int) -> Var:
        """Apply a fixed (m, n) matrix along one axis (e.g. time differences)."""
        av = _val(a)
        moved = np.moveaxis(av, axis, -1)
        out_values = np.moveaxis(moved @ matrix.T, -1, axis)
        out = Var(out_values)

        def vjp(g):
            gm = np.moveaxis(g, axis, -1)
            return (np.moveaxis(gm @ matrix, -1, axis),)

        return self._record(out, (a,), vjp)

    # -- point queries -------------------------------------------------------

    def trig_query(self, a, lengths, point, deriv_axis: int | None = None) -> Var:
        """Trigonometric interpolation of a real field (C, *sp) at one point."""
        av = _val(a)
        spatial = av.shape[1:]
        n_tot = int(np.prod(spatial))
        coeff = np.fft.fftn(av, axes=tuple(range(1, av.ndim)))
        mult = _query_weights(spatial, lengths, point, deriv_axis)
        out = Var(
            np.real(
                np.tensordot(coeff, mult, axes=(tuple(range(1, av.ndim)),
                                                tuple(range(len(spatial)))))
            )
            / n_tot
        )

        def vjp(g):
            # adjoint kernel: K_j = Re(sum_k mult_k e^{-2 pi i k j / N}) / N
            kernel = np.real(np.fft.fftn(mult)) / n_tot
            return (g.reshape((-1,) + (1,) * len(spatial)) * kernel,)

        return self._record(out, (a,), vjp)

    def spectrum_query(self, spec, layout: "ModeLayout", lengths, point,
                       deriv_axis: int | None = None) -> Var:
        """Direct summation of retained Fourier coefficients at one point.

        Sums only the modes a :class:`ModeLayout` retains (no inverse FFT),
        which is exact when the spectrum vanishes outside the retained set.
        """
        sv = _val(spec)
        spatial = sv.shape[1:]
        n_tot = int(np.prod(spatial))
        mult = _query_weights(spatial, lengths, point, deriv_axis)
        mask = layout.mask(spatial)
        weights = np.where(mask, mult, 0.0)
        out = Var(
            np.real(
                np.tensordot(sv, weights, axes=(tuple(range(1, sv.ndim)),
                                                tuple(range(len(spatial)))))
            )
            / n_tot
        )

        def vjp(g):
            gs = g.reshape((-1,) + (1,) * len(spatial))
            return (gs * np.conj(weights) / n_tot,)

        return self._record(out, (spec,), vjp)


def _query_weights(spatial, lengths, point, deriv_axis):
    phase = np.zeros(spatial, dtype=np.complex128)
    deriv = None
    for ax, (n, length) in enumerate(zip(spatial, lengths)):
        k = np.fft.fftfreq(n, d=1.0 / n)
        shape = [1] * len(spatial)
        shape[ax] = n
        freq = (2j * np.pi * k / length).reshape(shape)
        phase = phase + freq * point[ax]
        if deriv_axis == ax:
            deriv = freq
    mult = np.exp(phase)
    if deriv_axis is not None:
        mult = mult * deriv
    return mult


class ModeLayout:
    """Index bookkeeping for corner-mode extraction from a full spectrum.

    Retained modes: |k_i| <= modes-1 on every axis.  Stored representatives
    keep the non-negative half of the last axis (symmetric ranges
    0..m-1, -(m-1)..-1 on the others); conjugate mirrors are derived.
    """

    def __init__(self, spatial_shape, modes):
        self.spatial_shape = tuple(spatial_shape)
        d = len(self.spatial_shape)
        self.modes = tuple(modes) if np.iterable(modes) else (int(modes),) * d
        if len(self.modes) != d:
            raise ValueError("one mode count per axis required")
        for n, m in zip(self.spatial_shape, self.modes):
            if m < 1 or n < 2 * m:
                raise ValueError(
                    f"resolution {n} too small for {m} retained modes (need >= {2 * m})"
                )
        rep_axes = []
        for ax, (n, m) in enumerate(zip(self.spatial_shape, self.modes)):
            if ax == d - 1:
                idx = np.arange(m)
            else:
                idx = np.concatenate([np.arange(m), np.arange(n - m + 1, n)])
            rep_axes.append(idx)
        self._rep_axes = rep_axes
        m_last = self.modes[-1]
        n_last = self.spatial_shape[-1]
        other = rep_axes[:-1]
        self.col0_ix = (slice(None),) + np.ix_(*other, np.array([0]))
        self.r_col0_slice = (Ellipsis, slice(0, 1), slice(None), slice(None))
        self.has_rest = m_last > 1
        if self.has_rest:
            rest_last = np.arange(1, m_last)
            self.rest_ix = (slice(None),) + np.ix_(*other, rest_last)
            mir_other = [(-idx) % n for idx, n in zip(other, self.spatial_shape)]
            self._mir_axes = mir_other + [(-rest_last) % n_last]
            self.mir_ix = (slice(None),) + np.ix_(*self._mir_axes)
            self.r_rest_slice = (Ellipsis, slice(1, None), slice(None), slice(None))
        self._n_mode_axes = d - 1  # symmetric axes of the weight tensor
        if self._n_mode_axes:
            # position permutation realizing k -> -k on each symmetric axis
            perms = []
            for ax in range(self._n_mode_axes):
                e = 2 * self.modes[ax] - 1
                perms.append((-np.arange(e)) % e)
            self._neg_ix = np.ix_(*perms)
        else:
            self._neg_ix = None

    def negate_r_modes(self, arr: np.ndarray) -> np.ndarray:
        """Weight tensor evaluated at negated modes on the symmetric axes."""
        if self._neg_ix is None:
            return arr
        return arr[self._neg_ix]

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(len(idx) for idx in self._rep_axes)

    def mask(self, spatial_shape) -> np.ndarray:
        out = np.zeros(spatial_shape, dtype=bool)
        out[np.ix_(*self._rep_axes)] = True
        if self.has_rest:
            out[np.ix_(*self._mir_axes)] = True
        return out


def gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_prime(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def gelu_second(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return phi * (2.0 - x * x)


def backward(loss: Var, tape: Tape) -> dict[Var, np.ndarray]:
    """Reverse sweep: gradients of a scalar loss for all requires_grad Vars."""
    if loss.values.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
    if loss._creator is not None and loss._creator != id(tape):
        raise MissingNodeError("loss was produced on a different tape")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    leaf_grads: dict[Var, np.ndarray] = {}
    if loss.requires_grad and loss._creator is None:
        leaf_grads[loss] = np.asarray(1.0)
    for out, parents, vjp in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = vjp(g)
        for parent, pg in zip(parents, parent_grads):
            if not isinstance(parent, Var) or pg is None:
                continue
            if parent._creator is not None and parent._creator != id(tape):
                raise MissingNodeError(
                    "encountered a value produced on a different tape"
                )
            if np.iscomplexobj(parent.values):
                pg = np.asarray(pg, dtype=np.complex128)
            else:
                pg = _real_grad(np.asarray(pg))
            if parent._creator == id(tape):
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            elif parent.requires_grad:
                if parent in leaf_grads:
                    leaf_grads[parent] = leaf_grads[parent] + pg
                else:
                    leaf_grads[parent] = pg
    return leaf_grads


class ParamStore:
    """Named parameter tensors with stable order and gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Var] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, values: np.ndarray) -> Var:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        var = Var(np.asarray(values), requires_grad=True)
        self._params[name] = var
        self.grads[name] = np.zeros_like(var.values)
        return var

    def __getitem__(self, name: str) -> Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_scalars(self) -> int:
        total = 0
        for var in self._params.values():
            total += var.values.size * (2 if np.iscomplexobj(var.values) else 1)
        return total

    def zero_grad(self):
        for name, var in self._params.items():
            self.grads[name] = np.zeros_like(var.values)

    def accumulate(self, leaf_grads: dict[Var, np.ndarray]):
        for name, var in self._params.items():
            g = leaf_grads.get(var)
            if g is not None:
                self.grads[name] = self.grads[name] + g

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for name, var in self._params.items():
            new.add(name, var.values.copy())
        return new

    def load_values(self, other: "ParamStore"):
        for name, var in self._params.items():
            var.values = other._params[name].values.copy()

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {name: var.values for name, var in self._params.items()}


def grad_check(f, params: ParamStore, eps: float = 1e-5, value_fn=None) -> float:
    """Worst relative error of reverse-mode gradients vs central differences.

    ``f(params, tape)`` must build a scalar Var on the given tape.  Every
    real scalar entry of every parameter (real and imaginary parts of complex
    tensors separately) is perturbed by +/- eps.

    ``value_fn(params) -> float``, when given, is used for the
    finite-difference evaluations; it must compute exactly the same scalar
    as ``f`` (e.g. a version that reuses cached stages whose inputs are
    unchanged).
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    tape = Tape()
    loss = f(params, tape)
    if not np.isfinite(loss.values):
        raise NumericFailureError("loss is not finite")
    params.zero_grad()
    params.accumulate(backward(loss, tape))
    analytic = {name: g.copy() for name, g in params.grads.items()}

    def eval_scalar() -> float:
        if value_fn is not None:
            value = float(value_fn(params))
        else:
            value = float(f(params, Tape()).values)
        if not np.isfinite(value):
            raise NumericFailureError("finite-difference evaluation is not finite")
        return value

    worst = 0.0
    for name, var in params.items():
        flat = var.values.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        complex_param = np.iscomplexobj(var.values)
        steps = (1.0, 1j) if complex_param else (1.0,)
        for i in range(flat.size):
            original = flat[i]
            for step in steps:
                flat[i] = original + eps * step
                f_plus = eval_scalar()
                flat[i] = original - eps * step
                f_minus = eval_scalar()
                flat[i] = original
                fd = (f_plus - f_minus) / (2.0 * eps)
                g = grad_flat[i]
                an = (g.imag if step == 1j else g.real) if complex_param else g
                denom = max(abs(an), abs(fd), 1e-12)
                worst = max(worst, abs(an - fd) / denom)
    return worst
