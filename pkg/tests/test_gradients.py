"""Finite-difference validation of analytic gradients.

For each training objective, autograd gradients with respect to every
involved network's parameters are compared against central differences on
small random instances, in double precision (tight tolerance) plus a
float32 spot check.
"""

import numpy as np
import pytest
import torch

from clva import losses
from clva.models import ModelConfig, init_model

GRAD_CONFIG = ModelConfig(
    channels=8, style_dim=8, attention_bottleneck=4, vocab_size=64, disc_stages=1
)

TEXTS = ["red horizontal stripes", "blue checkerboard pattern"]
BOXES = [(0, 0, 4, 4), (12, 8, 4, 4)]  # fixed 4x4 patch crops inside 32x32

# atol sits above the central-difference noise floor (~1e-8 for O(1)
# losses at eps=1e-6) so true-zero gradients compare cleanly
DOUBLE = dict(dtype=torch.float64, eps=1e-6, rtol=1e-5, atol=5e-8)
SINGLE = dict(eps=1e-6, rtol=1e-3, atol=1e-5)


def make_model(dtype, seed=0):
    model = init_model(GRAD_CONFIG, seed)
    if dtype == torch.float64:
        model = model.double()
    # shake every parameter so zero-initialized heads and attention gains
    # sit at generic values
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g).to(p.dtype))
    return model


def make_inputs(dtype, seed=1):
    rng = np.random.default_rng(seed)
    def img(n):
        return torch.tensor(rng.uniform(-0.9, 0.9, size=(n, 3, 32, 32)), dtype=dtype)
    return {"content": img(1), "content2": img(2), "style": img(1), "style2": img(2)}


def build_cases(model, inputs):
    """Closure per objective plus the networks whose parameters feed it."""
    x = inputs["content"]
    s_img = inputs["style"]
    c2 = inputs["content2"]
    s2 = inputs["style2"]
    with torch.no_grad():
        emb_const = model.embed_text(TEXTS[:1]).detach().repeat(len(BOXES), 1)
        fake_patches = torch.cat(
            [inputs["content"][:, :, t : t + ph, l : l + pw] for (t, l, ph, pw) in BOXES], 0
        ).detach()
        real_patches = torch.cat(
            [s_img[:, :, t : t + ph, l : l + pw] for (t, l, ph, pw) in BOXES], 0
        ).detach()

    def rec():
        cmap, style = model.encode(x)
        return losses.reconstruction_loss(model.generate(cmap, style), x)

    def psd():
        cmap, _ = model.encode(x)
        emb = model.embed_text(TEXTS[:1])
        out = model.generate(cmap, emb)
        patches = torch.cat([out[:, :, t : t + ph, l : l + pw] for (t, l, ph, pw) in BOXES], 0)
        d = model.judge_patches(patches, emb.repeat(len(BOXES), 1))
        return losses.patch_style_loss(d)

    def d_loss():
        df = model.judge_patches(fake_patches, emb_const)
        dr = model.judge_patches(real_patches, emb_const)
        return losses.discriminator_loss(df, dr)

    def matching(which):
        def f():
            cmap, _ = model.encode(x)
            emb = model.embed_text(TEXTS[:1])
            out = model.generate(cmap, emb)
            out_map, out_style = model.encode(out)
            _, ref_style = model.encode(s_img)
            cm, sm = losses.matching_losses(out_map, out_style, cmap, ref_style)
            return cm if which == "cm" else sm
        return f

    def contrastive(which):
        def f():
            cmaps, _ = model.encode(c2)
            _, ref_styles = model.encode(s2)
            emb = model.embed_text(TEXTS)
            outs = model.generate(cmaps[[0, 0, 1, 1]], emb[[0, 1, 0, 1]])
            om, os = model.encode(outs)
            feats = [(om[i], os[i]) for i in range(4)]
            cc, cs = losses.consistent_matching(*feats)
            if which == "c_content":
                return cc
            if which == "c_style":
                return cs
            return losses.relative_matching(
                os[0], os[1], os[2], os[3], ref_styles[0], ref_styles[1]
            )
        return f

    gen_nets = ["encoder", "decoder", "text_encoder"]
    return {
        "rec": (rec, ["encoder", "decoder"]),
        "psd": (psd, gen_nets + ["discriminator"]),
        "d_loss": (d_loss, ["discriminator"]),
        "cm": (matching("cm"), gen_nets),
        "sm": (matching("sm"), gen_nets),
        "c_content": (contrastive("c_content"), gen_nets),
        "c_style": (contrastive("c_style"), gen_nets),
        "r_style": (contrastive("r_style"), gen_nets),
    }


def check_param_grads(model, closure, networks, *, eps, rtol, atol, rng, tensors_per_net=3, entries_per_tensor=2):
    model.zero_grad(set_to_none=True)
    closure().backward()
    analytic = {n: (p.grad.clone() if p.grad is not None else None) for n, p in model.named_parameters()}
    named = dict(model.named_parameters())
    failures = []
    for net in networks:
        cand = [n for n in named if n.startswith(net + ".")]
        take = min(tensors_per_net, len(cand))
        chosen = [cand[i] for i in rng.choice(len(cand), size=take, replace=False)]
        for name in chosen:
            p = named[name]
            flat = p.detach().reshape(-1)
            idxs = rng.choice(flat.numel(), size=min(entries_per_tensor, flat.numel()), replace=False)
            for idx in idxs:
                idx = int(idx)
                a = 0.0 if analytic[name] is None else float(analytic[name].reshape(-1)[idx])
                with torch.no_grad():
                    orig = float(flat[idx])
                    flat[idx] = orig + eps
                    fp = float(closure())
                    flat[idx] = orig - eps
                    fm = float(closure())
                    flat[idx] = orig
                fd = (fp - fm) / (2 * eps)
                err = abs(a - fd)
                if err > max(atol, rtol * max(abs(a), abs(fd))):
                    failures.append(f"{name}[{idx}]: analytic {a:.3e} fd {fd:.3e} err {err:.3e}")
    assert not failures, "\n".join(failures)


@pytest.mark.parametrize("case_name", ["rec", "psd", "d_loss", "cm", "sm", "c_content", "c_style", "r_style"])
def test_param_gradients_double(case_name):
    model = make_model(torch.float64)
    cases = build_cases(model, make_inputs(torch.float64))
    closure, networks = cases[case_name]
    check_param_grads(model, closure, networks, rng=np.random.default_rng(42), **{k: v for k, v in DOUBLE.items() if k != "dtype"})


@pytest.mark.parametrize("case_name", ["rec", "psd", "d_loss", "c_style"])
def test_param_gradients_single(case_name):
    """float32 autograd against a float64 finite-difference oracle at the
    same parameter point (float32 FD itself drowns in forward round-off)."""
    model32 = make_model(torch.float32)
    model64 = make_model(torch.float64)  # same values: f32 init cast up exactly
    inputs32 = make_inputs(torch.float32)
    inputs64 = {k: v.double() for k, v in inputs32.items()}
    closure32, networks = build_cases(model32, inputs32)[case_name]
    closure64, _ = build_cases(model64, inputs64)[case_name]

    model32.zero_grad(set_to_none=True)
    closure32().backward()
    analytic = {n: p.grad for n, p in model32.named_parameters()}
    named64 = dict(model64.named_parameters())
    rng = np.random.default_rng(43)
    eps, rtol, atol = SINGLE["eps"], SINGLE["rtol"], SINGLE["atol"]
    failures = []
    for net in networks:
        cand = [n for n in named64 if n.startswith(net + ".")]
        for name in (cand[i] for i in rng.choice(len(cand), size=min(2, len(cand)), replace=False)):
            flat = named64[name].detach().reshape(-1)
            idx = int(rng.choice(flat.numel()))
            a = 0.0 if analytic[name] is None else float(analytic[name].reshape(-1)[idx])
            with torch.no_grad():
                orig = float(flat[idx])
                flat[idx] = orig + eps
                fp = float(closure64())
                flat[idx] = orig - eps
                fm = float(closure64())
                flat[idx] = orig
            fd = (fp - fm) / (2 * eps)
            err = abs(a - fd)
            if err > max(atol, rtol * max(abs(a), abs(fd))):
                failures.append(f"{name}[{idx}]: analytic {a:.3e} fd {fd:.3e} err {err:.3e}")
    assert not failures, "\n".join(failures)


def test_relative_matching_case_is_nontrivial():
    # the cosine weight must be away from the clamp boundary so the FD
    # probe actually exercises the weighted branch
    model = make_model(torch.float64)
    inputs = make_inputs(torch.float64)
    with torch.no_grad():
        _, ref_styles = model.encode(inputs["style2"])
        w = torch.nn.functional.cosine_similarity(ref_styles[0], ref_styles[1], dim=0)
    assert abs(float(w)) > 0.01


def test_discriminator_untouched_by_generator_losses():
    model = make_model(torch.float64)
    cases = build_cases(model, make_inputs(torch.float64))
    for name in ("rec", "cm", "sm", "c_content", "c_style", "r_style"):
        closure, _ = cases[name]
        model.zero_grad(set_to_none=True)
        closure().backward()
        for pname, p in model.named_parameters():
            if pname.startswith("discriminator."):
                assert p.grad is None or float(p.grad.abs().max()) == 0.0, (name, pname)


def fd_input_grad(fn, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        with torch.no_grad():
            orig = float(flat[i])
            flat[i] = orig + eps
            fp = float(fn())
            flat[i] = orig - eps
            fm = float(fn())
            flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


@pytest.mark.parametrize(
    "loss_name",
    ["rec", "psd", "d_fake", "d_real", "cm", "sm", "c_content", "c_style", "r_style", "r_weight"],
)
def test_loss_input_gradients_double(loss_name):
    rng = np.random.default_rng(7)
    t = lambda shape: torch.tensor(rng.normal(size=shape), dtype=torch.float64, requires_grad=True)
    u = lambda shape: torch.tensor(rng.uniform(0.1, 0.9, size=shape), dtype=torch.float64, requires_grad=True)

    if loss_name == "rec":
        x, ref = t(8), t(8).detach()
        fn = lambda: losses.reconstruction_loss(x, ref)
    elif loss_name == "psd":
        x = u(8)
        fn = lambda: losses.patch_style_loss(x)
    elif loss_name == "d_fake":
        x, other = u(8), u(8).detach()
        fn = lambda: losses.discriminator_loss(x, other)
    elif loss_name == "d_real":
        x, other = u(8), u(8).detach()
        fn = lambda: losses.discriminator_loss(other, x)
    elif loss_name == "cm":
        x, ref = t((2, 4)), t((2, 4)).detach()
        fn = lambda: losses.matching_losses(x, ref[0], ref, ref[0])[0]
    elif loss_name == "sm":
        x, ref = t(8), t(8).detach()
        fn = lambda: losses.matching_losses(ref, x, ref, ref.detach())[1]
    elif loss_name == "c_content":
        x = t((2, 4))  # content map of the first result
        others = [t((2, 4)).detach() for _ in range(3)]
        sv = [t(4).detach() for _ in range(4)]
        fn = lambda: losses.consistent_matching(
            (x, sv[0]), (others[0], sv[1]), (others[1], sv[2]), (others[2], sv[3])
        )[0]
    elif loss_name == "c_style":
        x = t(4)  # style vector of the first result
        cm_ = [t((2, 4)).detach() for _ in range(4)]
        sv = [t(4).detach() for _ in range(3)]
        fn = lambda: losses.consistent_matching(
            (cm_[0], x), (cm_[1], sv[0]), (cm_[2], sv[1]), (cm_[3], sv[2])
        )[1]
    elif loss_name == "r_style":
        x = t(8)  # style vector of the first result
        others = [t(8).detach() for _ in range(3)]
        ref = t(8).detach()
        fn = lambda: losses.relative_matching(x, others[0], others[1], others[2], ref, 0.5 * ref + 0.1)
    else:  # r_weight: gradient through the cosine weight itself
        x = t(8)  # first reference style vector
        s = [t(8).detach() for _ in range(4)]
        other_ref = t(8).detach()
        fn = lambda: losses.relative_matching(s[0], s[1], s[2], s[3], x, other_ref)
        if float(fn()) == 0.0:  # clamped: flip the reference so cos > 0
            with torch.no_grad():
                x.neg_()

    out = fn()
    out.backward()
    analytic = x.grad.clone()
    fd = fd_input_grad(fn, x)
    np.testing.assert_allclose(analytic.numpy(), fd.numpy(), rtol=1e-5, atol=1e-8)
