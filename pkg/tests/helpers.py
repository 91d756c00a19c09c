"""Shared numerical checks used by the unit and acceptance suites."""

import math
import warnings
from fractions import Fraction

import numpy as np
import torch

from coopsem.channel import sample_channel
from coopsem.task import RetrievalIndex, mean_average_precision, rank_n_accuracy, retrieve
from coopsem.training import CoSCSystem, stage3_loss

from conftest import tiny_config


def oracle_ranking(q, feats, labels, cams, q_label, q_cam):
    """Exhaustive ranking: every candidate compared with every other, ties broken by gallery index."""
    cand = [k for k in range(len(labels)) if not (labels[k] == q_label and cams[k] == q_cam)]
    d = {k: sum((float(a) - float(b)) ** 2 for a, b in zip(q, feats[k])) for k in cand}
    ranked = []
    for k in cand:
        pos = sum(1 for j in cand if d[j] < d[k] or (d[j] == d[k] and j < k))
        ranked.append((pos, k))
    return [k for _, k in sorted(ranked)]


def oracle_metrics(rankings, rel_labels, n_values):
    scored = [(r, lab) for r, lab in zip(rankings, rel_labels) if any(x == lab for x in r[1])]
    out = {}
    for n in n_values:
        hits = sum(1 for r, lab in scored if any(r[1][k] == lab for k in range(min(n, len(r[1])))))
        out[n] = Fraction(hits, len(scored)) if scored else Fraction(0)
    aps = []
    for (order, labs), lab in scored:
        rel = [labs[k] == lab for k in range(len(order))]
        total = sum(rel)
        ap, seen = Fraction(0), 0
        for k, r in enumerate(rel, start=1):
            if r:
                seen += 1
                ap += Fraction(seen, k)
        aps.append(ap / total)
    out["mAP"] = sum(aps, Fraction(0)) / len(aps) if aps else Fraction(0)
    return out


def check_metric_instance(instance: int):
    """Random retrieval instance (<= 20 gallery items, <= 5 queries) checked against the oracle.

    Returns None on agreement, else a description of the first mismatch.
    """
    rng = np.random.default_rng(instance)
    n_gal = int(rng.integers(1, 21))
    n_q = int(rng.integers(1, 6))
    dim = int(rng.integers(1, 4))
    # small integer features make exact distance ties common
    feats = rng.integers(-2, 3, size=(n_gal, dim)).astype(float)
    labels = rng.integers(0, 4, size=n_gal)
    cams = rng.integers(1, 3, size=n_gal)
    index = RetrievalIndex(feats, labels, cams)
    lists, oracle_in = [], []
    for _ in range(n_q):
        q = rng.integers(-2, 3, size=dim).astype(float)
        ql, qc = int(rng.integers(0, 4)), int(rng.integers(1, 3))
        r = retrieve(q, index, ql, qc)
        order = oracle_ranking(q, feats, labels, cams, ql, qc)
        if r.indices.tolist() != order:
            return f"instance {instance}: ranking {r.indices.tolist()} != oracle {order}"
        lists.append(r)
        oracle_in.append(((order, labels[order].tolist()), ql))
    expected = oracle_metrics([o for o, _ in oracle_in], [lab for _, lab in oracle_in], (1, 3, 5))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for n in (1, 3, 5):
            if rank_n_accuracy(lists, n) != float(expected[n]):
                return f"instance {instance}: rank-{n} {rank_n_accuracy(lists, n)} != {float(expected[n])}"
        got = mean_average_precision(lists)
    # the oracle works in exact rationals; allow only float rounding of the mean
    if not math.isclose(got, float(expected["mAP"]), rel_tol=0, abs_tol=1e-15):
        return f"instance {instance}: mAP {got} != {float(expected['mAP'])}"
    return None


def stage3_gradcheck(seed=0, eps=1e-6):
    """Autograd vs central differences of the stage-3 loss over every JSC-encoder parameter.

    Returns (max element-wise relative error, relative error of the whole gradient vector
    in the 2-norm). Double precision, tiny model, fixed channel and noise.
    """
    cfg = tiny_config(n_symbols=2, feature_dim=4)
    torch.manual_seed(seed)
    system = CoSCSystem(cfg, "cosc", 3).double()
    system.eval()
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand(3, 2, 3, 16, 16, generator=gen, dtype=torch.float64)
    labels = torch.tensor([[0, 0], [1, 2], [2, 2]])
    corr = torch.tensor([True, False, True])
    chan = sample_channel(2, 4, gen, 0.2, batch_shape=(3,))
    noise = torch.complex(torch.randn(3, 4, 2, generator=gen, dtype=torch.float64),
                          torch.randn(3, 4, 2, generator=gen, dtype=torch.float64)) * math.sqrt(0.1)

    def loss():
        return stage3_loss(system, images, labels, corr, chan, noise=noise, mse_weight=1.0)

    params = list(system.jsc_encoders.parameters())
    grads = torch.autograd.grad(loss(), params)
    worst, fds, ans = 0.0, [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                fd = (up - down) / (2 * eps)
                an = g.view(-1)[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
                fds.append(fd)
                ans.append(an)
    fds, ans = torch.tensor(fds), torch.tensor(ans)
    return worst, float(torch.linalg.norm(fds - ans) / torch.linalg.norm(ans))
