"""Straight-line numpy reference implementations used as test oracles.

Nothing here imports torch: parameters come in as plain arrays keyed by the
module's state-dict names. Convolutions loop explicitly over batch, output
channel and output pixel. Batch norm is applied in inference form when its
running statistics are present and skipped otherwise.
"""
import numpy as np


def to_numpy_params(module):
    return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in module.state_dict().items()}


def sub(params, prefix):
    prefix = prefix + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    B, C, H, W = x.shape
    C_out, C_in_g, kh, kw = w.shape
    assert C == C_in_g * groups
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out_per_group = C_out // groups
    out = np.zeros((B, C_out, Ho, Wo))
    for n in range(B):
        for co in range(C_out):
            g = co // out_per_group
            cin = slice(g * C_in_g, (g + 1) * C_in_g)
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, cin, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    acc = 0.0
                    for c in range(C_in_g):
                        for u in range(kh):
                            for v in range(kw):
                                acc += patch[c, u, v] * w[co, c, u, v]
                    out[n, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def conv_from(params, prefix, x, stride=1, padding=None, groups=1):
    w = params[prefix + ".weight"]
    b = params.get(prefix + ".bias")
    if padding is None:
        padding = w.shape[-1] // 2
    return conv2d(x, w, b, stride, padding, groups)


def batchnorm(params, prefix, x, eps=1e-5):
    if prefix + ".running_mean" not in params:
        return x
    mean = params[prefix + ".running_mean"][None, :, None, None]
    var = params[prefix + ".running_var"][None, :, None, None]
    w = params[prefix + ".weight"][None, :, None, None]
    b = params[prefix + ".bias"][None, :, None, None]
    return (x - mean) / np.sqrt(var + eps) * w + b


def linear(params, prefix, v):
    w = params[prefix + ".weight"]
    b = params[prefix + ".bias"]
    out = np.zeros((v.shape[0], w.shape[0]))
    for n in range(v.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = sum(v[n, i] * w[o, i] for i in range(w.shape[1])) + b[o]
    return out


def avgpool2(x):
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    out = np.zeros((B, C, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            out[:, :, i, j] = (
                x[:, :, 2 * i, 2 * j] + x[:, :, 2 * i + 1, 2 * j]
                + x[:, :, 2 * i, 2 * j + 1] + x[:, :, 2 * i + 1, 2 * j + 1]
            ) / 4.0
    return out


def upsample_nearest(x, H, W):
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:2] + (H, W))
    for i in range(H):
        for j in range(W):
            out[:, :, i, j] = x[:, :, (i * h) // H, (j * w) // W]
    return out


def dws(params, prefix, x):
    C = x.shape[1]
    y = conv_from(params, prefix + ".depthwise", x, groups=C)
    return conv_from(params, prefix + ".pointwise", y)


def refine(params, prefix, x):
    if prefix + ".stack1.depthwise.weight" not in params:
        return x
    H, W = x.shape[-2:]
    y = dws(params, prefix + ".stack1", x)
    if H >= 2 and W >= 2:
        y = upsample_nearest(dws(params, prefix + ".stack2", avgpool2(y)), H, W)
    else:
        y = dws(params, prefix + ".stack2", y)
    return y


def mlp(params, prefix, v):
    return linear(params, prefix + ".2", relu(linear(params, prefix + ".0", v)))


def dcam(params, x, prefix="dcam"):
    p = (prefix + ".") if prefix else ""
    fm = refine(params, p + "refine", x)
    B, C, H, W = fm.shape
    avg = np.zeros((B, C))
    mx = np.full((B, C), -np.inf)
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    avg[n, c] += fm[n, c, i, j] / (H * W)
                    mx[n, c] = max(mx[n, c], fm[n, c, i, j])
    logits = (mlp(params, p + "mlp", avg) + mlp(params, p + "mlp", mx))[:, :, None, None]
    return sigmoid(logits) * x, logits


def dsam(params, x, prefix="dsam"):
    p = (prefix + ".") if prefix else ""
    fm = refine(params, p + "refine", x)
    B, C, H, W = fm.shape
    pooled = np.zeros((B, 2, H, W))
    for n in range(B):
        for i in range(H):
            for j in range(W):
                vals = [fm[n, c, i, j] for c in range(C)]
                pooled[n, 0, i, j] = sum(vals) / C
                pooled[n, 1, i, j] = max(vals)
    logits = conv_from(params, p + "conv", pooled)
    return sigmoid(logits) * x, logits


def dbam(params, x, prefix="attention"):
    y, mc = dcam(params, x, prefix + ".dcam")
    y, ms = dsam(params, y, prefix + ".dsam")
    return y, (mc, ms)


def mab(params, x, stride=1, activate_output=True, prefix=""):
    p = (prefix + ".") if prefix else ""
    y = relu(batchnorm(params, p + "bn1", conv_from(params, p + "conv1", x, stride=stride)))
    y = batchnorm(params, p + "bn2", conv_from(params, p + "conv2", y))
    maps = None
    if p + "attention.dcam.mlp.0.weight" in params:
        y, maps = dbam(params, y, p + "attention")
    if p + "shortcut.0.weight" in params:
        skip = batchnorm(params, p + "shortcut.1", conv_from(params, p + "shortcut.0", x, stride=stride, padding=0))
    else:
        skip = x
    out = y + skip
    return (relu(out) if activate_output else out), maps


def mcb_stage(params, prefix, x):
    return relu(batchnorm(params, prefix + ".bn", dws(params, prefix + ".conv", x)))


def mcb_cascade(params, prefix, pieces):
    outs = [mcb_stage(params, prefix + ".0", pieces[0])]
    for i in range(1, 4):
        outs.append(mcb_stage(params, f"{prefix}.{i}", outs[-1]) + pieces[i])
    return np.concatenate(outs, axis=1)


def mcb_replicate(params, f, prefix=""):
    p = (prefix + ".") if prefix else ""
    reduced = conv_from(params, p + "reduce_conv", f, padding=0)
    return mcb_cascade(params, p + "branch1", [reduced] * 4)


def mcb_split(params, f, prefix=""):
    p = (prefix + ".") if prefix else ""
    q = f.shape[1] // 4
    return mcb_cascade(params, p + "branch2", [f[:, i * q:(i + 1) * q] for i in range(4)])


def mcb(params, x, residual="entry", activate_output=True, prefix=""):
    p = (prefix + ".") if prefix else ""
    f = relu(batchnorm(params, p + "entry_bn", conv_from(params, p + "entry_conv", x)))
    skip = f if residual == "entry" else x
    out = mcb_replicate(params, f, prefix) + mcb_split(params, f, prefix) + skip
    return relu(out) if activate_output else out


def network(params, x, strides, blocks_per_stage, global_branch=True):
    """Whole-network logits and attention maps from the per-block oracles."""
    h = relu(batchnorm(params, "stem.1", conv_from(params, "stem.0", x)))
    maps = []
    for s, (stride, blocks) in enumerate(zip(strides, blocks_per_stage)):
        local = h
        for b in range(blocks):
            local, m = mab(params, local, stride=stride if b == 0 else 1, prefix=f"stages.{s}.mabs.{b}")
            if m is not None:
                maps.append(m)
        if global_branch:
            pp = f"stages.{s}.projection"
            if pp + ".0.weight" in params:
                glob = batchnorm(params, pp + ".1", conv_from(params, pp + ".0", h, stride=stride, padding=0))
            else:
                glob = h
            for b in range(blocks):
                glob = mcb(params, glob, prefix=f"stages.{s}.mcbs.{b}")
            h = local + glob
        else:
            h = local
    pooled = h.mean(axis=(2, 3))
    return linear(params, "fc", pooled), maps


def cross_entropy_naive(logits, labels):
    """Softmax then log, no stabilisation."""
    total = 0.0
    for row, y in zip(logits, labels):
        e = np.exp(row)
        p = e / e.sum()
        total += -np.log(p[y])
    return total / len(labels)


def cosine_naive(t, s):
    t = np.ravel(t)
    s = np.ravel(s)
    return float(np.dot(t, s) / (np.linalg.norm(t) * np.linalg.norm(s)))
