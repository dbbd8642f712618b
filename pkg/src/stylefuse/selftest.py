"""Built-in invariant suite behind `stylefuse selftest`.

Each check returns how many individual assertions ran so the CLI can
print counts; any failure names the property that broke. The whole
suite is sized to finish in well under five minutes on a laptop CPU.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import toyworld as tw
from .aligner import TiaaParams, align
from .config import load_config, pipeline_config
from .diffusion import (cfg_combine, diffuse_to, make_schedule, reverse_step_ddpm,
                        strided_schedule)
from .fusion import build_prompt, interpolate
from .model import Pipeline
from .style_extractor import AseConfig, AseStack, extract_style
from .tensor import RngStream, Tensor, finite_diff_grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _grad_of(f, x: Tensor) -> np.ndarray:
    x.grad = None
    out = f(x)
    out.backward()
    return x.grad


def check_op_gradients(seed: int = 0) -> int:
    """Analytic vs central-difference gradients for every differentiable op."""
    rng = RngStream(seed).child("selftest-grads")
    checks = 0

    def expect(f, x, tol=1e-4):
        nonlocal checks
        analytic = _grad_of(f, x)
        numeric = finite_diff_grad(f, x, 1e-5)
        err = _rel_err(analytic, numeric)
        if err >= tol:
            raise AssertionError(f"gradient mismatch (rel err {err:.2e})")
        checks += 1

    for trial in range(6):
        r = rng.child(trial)
        m, k, n = (int(v) for v in r.child("dims").integers(2, 7, (3,)))
        b = Tensor(r.child("b").normal((k, n), dtype=np.float64))
        expect(lambda a: T.sum_(T.matmul(a, b)),
               Tensor(r.child("a").normal((m, k), dtype=np.float64)))
        w = Tensor(r.child("w").normal((k, n), dtype=np.float64))
        bias = Tensor(r.child("bias").normal((n,), dtype=np.float64))
        expect(lambda x: T.mean_(T.linear(x, w, bias)),
               Tensor(r.child("x").normal((m, k), dtype=np.float64)))
        expect(lambda x: T.sum_(T.mul(T.softmax_rows(x), Tensor(
            r.child("probe").normal((m, k), dtype=np.float64)))),
            Tensor(r.child("sm").normal((m, k), dtype=np.float64)))
        expect(lambda x: T.sum_(T.gelu(x)),
               Tensor(r.child("g").normal((m, k), dtype=np.float64)))
        wts = T.softmax_rows(Tensor(r.child("aw").normal((2, m, k), dtype=np.float64)))
        expect(lambda v: T.sum_(T.attn_mix(wts, v)),
               Tensor(r.child("av").normal((2, k, n), dtype=np.float64)))
        cw = Tensor(r.child("cw").normal((3, 2, 3, 3), dtype=np.float64) * 0.5)
        cb = Tensor(r.child("cb").normal((3,), dtype=np.float64) * 0.1)
        expect(lambda x: T.sum_(T.conv2d(x, cw, cb, stride=1, pad=1)),
               Tensor(r.child("cx").normal((2, 2, 4, 4), dtype=np.float64)))
        gamma = Tensor(r.child("gn.g").normal((4,), dtype=np.float64))
        beta = Tensor(r.child("gn.b").normal((4,), dtype=np.float64))
        expect(lambda x: T.sum_(T.mul(T.group_norm(x, gamma, beta, 2), Tensor(
            r.child("gn.probe").normal((2, 4, 3, 3), dtype=np.float64)))),
            Tensor(r.child("gn.x").normal((2, 4, 3, 3), dtype=np.float64)))
    return checks


def check_softmax_invariants(seed: int = 0) -> int:
    rng = RngStream(seed).child("selftest-softmax")
    checks = 0
    for trial in range(20):
        r = rng.child(trial)
        x = Tensor(r.child("x").normal((3, 5), dtype=np.float64))
        p = T.softmax_rows(x)
        if np.max(np.abs(p.data.sum(axis=-1) - 1.0)) > 1e-9:
            raise AssertionError("softmax rows do not sum to 1")
        shifted = T.softmax_rows(T.add_scalar(x, float(r.child("c").normal(()))))
        if np.max(np.abs(p.data - shifted.data)) > 1e-9:
            raise AssertionError("softmax is not shift-invariant")
        checks += 2
    return checks


def check_fusion_endpoints(seed: int = 0) -> int:
    rng = RngStream(seed).child("selftest-fusion")
    checks = 0
    for trial in range(10):
        r = rng.child(trial)
        a = Tensor(r.child("a").normal((2, 4, 8)))
        b = Tensor(r.child("b").normal((2, 4, 8)))
        if interpolate(a, b, 1.0).data.tobytes() != a.data.tobytes():
            raise AssertionError("fusion alpha=1 endpoint not bit-exact")
        if interpolate(a, b, 0.0).data.tobytes() != b.data.tobytes():
            raise AssertionError("fusion alpha=0 endpoint not bit-exact")
        a1, a2 = 0.3, 0.7
        lhs = interpolate(a, b, a1).data.astype(np.float64) \
            + interpolate(a, b, a2).data.astype(np.float64)
        rhs = 2.0 * interpolate(a, b, (a1 + a2) / 2).data.astype(np.float64)
        if np.max(np.abs(lhs - rhs)) > 1e-6:
            raise AssertionError("fusion is not linear in alpha")
        prompt = build_prompt(a, b)
        if prompt.fused.data.tobytes() != b.data.tobytes():
            raise AssertionError("prompt slice does not round-trip the fused tokens")
        checks += 4
    return checks


def check_cfg_endpoints(seed: int = 0) -> int:
    rng = RngStream(seed).child("selftest-cfg")
    checks = 0
    for trial in range(10):
        r = rng.child(trial)
        c = r.child("c").normal((3, 4))
        u = r.child("u").normal((3, 4))
        if cfg_combine(c, u, 1.0).tobytes() != c.tobytes():
            raise AssertionError("cfg w=1 endpoint not bit-exact")
        if cfg_combine(c, u, 0.0).tobytes() != u.tobytes():
            raise AssertionError("cfg w=0 endpoint not bit-exact")
        blend = cfg_combine(c, u, 0.6, "blend")
        extrap = cfg_combine(c, u, 0.6, "extrapolate")
        if np.max(np.abs(blend - extrap)) > 1e-6:
            raise AssertionError("cfg blend and extrapolate forms disagree")
        checks += 3
    return checks


def check_schedule_and_inversion(seed: int = 0) -> int:
    checks = 0
    sched = make_schedule(1000, 1e-4, 0.02)
    if not np.all(np.diff(sched.alpha_bar) < 0):
        raise AssertionError("alpha_bar is not strictly decreasing")
    direct = np.cumprod(1.0 - sched.beta)
    if np.max(np.abs(sched.alpha_bar - direct) / direct) > 1e-12:
        raise AssertionError("alpha_bar does not match the running product")
    sub = strided_schedule(sched, 25)
    resumed = np.cumprod(1.0 - sub.beta)
    if np.max(np.abs(resumed - sub.alpha_bar) / sub.alpha_bar) > 1e-10:
        raise AssertionError("strided sub-schedule does not telescope to the parent")
    checks += 1
    rng = RngStream(seed).child("selftest-invert")
    for trial in range(5):
        r = rng.child(trial)
        x0 = r.child("x0").normal((2, 3, 4), dtype=np.float64)
        eps = r.child("eps").normal((2, 3, 4), dtype=np.float64)
        t = int(r.child("t").integers(1, 1000, ()))
        x = diffuse_to(x0, t, sched, eps)
        for k in range(t, -1, -1):
            abar = sched.alpha_bar[k]
            oracle = (x - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)
            x = reverse_step_ddpm(x, k, oracle, sched, noise=None)
        if np.max(np.abs(x - x0)) > 1e-9:
            raise AssertionError("oracle reverse steps do not recover the input")
        checks += 1
    return checks


def check_permutation_invariance(seed: int = 0) -> int:
    rng = RngStream(seed).child("selftest-perm")
    checks = 0
    for trial in range(5):
        r = rng.child(trial)
        cfg = AseConfig(num_queries=4, dim=16, heads=2, layers=2, ff_dim=32, input_dim=12)
        stack = AseStack(cfg, r.child("stack"))
        x = Tensor(r.child("x").normal((2, 9, 12)))
        perm = np.argsort(r.child("perm").uniform((9,)))
        out = extract_style(x, stack)
        out_p = extract_style(Tensor(x.data[:, perm, :]), stack)
        if out.data.tobytes() != out_p.data.tobytes():
            raise AssertionError("style extraction is not token-permutation invariant")
        tiaa = TiaaParams(16, 16, r.child("tiaa"))
        e_t = Tensor(r.child("et").normal((2, 5, 16)))
        aligned, amap = align(out, e_t, tiaa)
        tperm = np.argsort(r.child("tperm").uniform((5,)))
        aligned_p, amap_p = align(out, Tensor(e_t.data[:, tperm, :]), tiaa)
        if aligned.data.tobytes() != aligned_p.data.tobytes():
            raise AssertionError("alignment output changed under text permutation")
        if amap.weights.data[:, :, tperm].tobytes() != amap_p.weights.data.tobytes():
            raise AssertionError("attention map columns did not permute with the text")
        checks += 3
    return checks


def check_determinism(seed: int = 0) -> int:
    checks = 0
    s1 = RngStream(seed).child("draws")
    s2 = RngStream(seed).child("draws")
    if s1.normal((8,)).tobytes() != s2.normal((8,)).tobytes():
        raise AssertionError("identical streams produced different draws")
    if s1.child("a").normal((8,)).tobytes() == s1.child("b").normal((8,)).tobytes():
        raise AssertionError("split streams overlap")
    checks += 2
    cfg = load_config(None, {"denoiser.base_channels": 8, "denoiser.mid_channels": 16,
                             "ase.queries": 4, "ase.layers": 1, "ase.dim": 16,
                             "ase.heads": 2, "ase.ff_dim": 32, "text.dim": 16,
                             "denoiser.t_dim": 16, "diffusion.T": 10,
                             "diffusion.steps": 5})
    pipe = Pipeline(pipeline_config(cfg), RngStream(3), with_adapter=True)
    ref = tw.render(1, 0)
    img_a = pipe.sample(tw.caption_tokens(2), ref, seed=7)
    img_b = pipe.sample(tw.caption_tokens(2), ref, seed=7)
    if img_a.tobytes() != img_b.tobytes():
        raise AssertionError("sampling is not deterministic for a fixed seed")
    text_only = pipe.sample(tw.caption_tokens(2), None, seed=7)
    scaled_zero = pipe.sample(tw.caption_tokens(2), ref, seed=7, adapter_scale=0.0)
    if text_only.tobytes() != scaled_zero.tobytes():
        raise AssertionError("adapter scale 0 does not reproduce text-only sampling")
    checks += 2
    return checks


SUITES = [
    ("op_gradients", check_op_gradients),
    ("softmax_invariants", check_softmax_invariants),
    ("fusion_endpoints", check_fusion_endpoints),
    ("cfg_endpoints", check_cfg_endpoints),
    ("schedule_and_inversion", check_schedule_and_inversion),
    ("permutation_invariance", check_permutation_invariance),
    ("determinism", check_determinism),
]


def run_selftest(print_fn=print) -> bool:
    ok = True
    for name, fn in SUITES:
        try:
            count = fn()
            print_fn(f"PASS {name} ({count} checks)")
        except AssertionError as e:
            ok = False
            print_fn(f"FAIL {name}: {e}")
    return ok
