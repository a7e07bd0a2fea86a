import math
from collections import deque

import numpy as np
import pytest

from conftest import disc, disc_mask, random_blob, random_mask
from cellflow.flowgen import (MissingInstanceError, _diffuse, cell_center, diffusion_iters,
                              flow_error, label_to_flow, pseudo_diffusion)
from cellflow.tracker import TrackConfig, follow_flows


def brute_center(member):
    pts = [(r, c) for r in range(member.shape[0]) for c in range(member.shape[1]) if member[r, c]]
    rows = sorted(p[0] for p in pts)
    cols = sorted(p[1] for p in pts)
    n = len(pts)

    def med(v):
        return v[n // 2] if n % 2 else (v[n // 2 - 1] + v[n // 2]) / 2.0

    my, mx = med(rows), med(cols)
    return min(pts, key=lambda p: ((p[0] - my) ** 2 + (p[1] - mx) ** 2, p))


def hand_diffusion(member, center, n_iter):
    """Scalar reference: inject 1 at the center, then 5-point average over members."""
    h, w = member.shape
    heat = [[0.0] * w for _ in range(h)]
    for _ in range(n_iter):
        heat[center[0]][center[1]] += 1.0
        nxt = [[0.0] * w for _ in range(h)]
        for r in range(h):
            for c in range(w):
                if not member[r, c]:
                    continue
                s = heat[r][c]
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w:
                        s += heat[rr][cc]
                nxt[r][c] = s / 5.0
        heat = nxt
    return np.array(heat)


def bfs_dist(member, start):
    dist = np.full(member.shape, -1)
    dist[start] = 0
    q = deque([start])
    while q:
        r, c = q.popleft()
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < member.shape[0] and 0 <= cc < member.shape[1] and member[rr, cc] \
                    and dist[rr, cc] < 0:
                dist[rr, cc] = dist[r, c] + 1
                q.append((rr, cc))
    return dist


def test_center_examples():
    assert cell_center(np.ones((3, 3), np.uint32), 1) == (1, 1)
    m = np.zeros((3, 3), np.uint32)
    for p in [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)]:
        m[p] = 1
    assert cell_center(m, 1) == brute_center(m == 1) == (2, 0)
    one = np.zeros((4, 4), np.uint32)
    one[2, 3] = 5
    assert cell_center(one, 5) == (2, 3)
    with pytest.raises(MissingInstanceError):
        cell_center(one, 4)
    with pytest.raises(MissingInstanceError):
        pseudo_diffusion(one, 4)


def test_center_matches_brute_force_on_random_blobs():
    rng = np.random.default_rng(3)
    for _ in range(200):
        member = random_blob(rng)
        c = cell_center(member.astype(np.uint32), 1)
        assert member[c]
        ref = brute_center(member)
        # same distance to the median, ties may pick either
        rows, cols = np.nonzero(member)
        my, mx = np.median(rows), np.median(cols)
        assert math.isclose((c[0] - my) ** 2 + (c[1] - mx) ** 2,
                            (ref[0] - my) ** 2 + (ref[1] - mx) ** 2)


def test_single_pixel_heat():
    m = np.zeros((5, 5), np.uint32)
    m[2, 2] = 1
    patch = pseudo_diffusion(m, 1)
    assert patch.origin == (2, 2) and patch.heat.shape == (1, 1) and patch.heat[0, 0] > 0
    t = label_to_flow(m)
    assert t.heat[2, 2] > 0 and np.count_nonzero(t.heat) == 1
    assert np.all(t.flow == 0)


def test_line_matches_hand_recurrence():
    m = np.ones((1, 5), np.uint32)
    assert cell_center(m, 1) == (0, 2)
    assert diffusion_iters(1, 5) == 20
    ref = np.log1p(hand_diffusion(m == 1, (0, 2), 20))[0]
    heat = pseudo_diffusion(m, 1).heat[0]
    np.testing.assert_allclose(heat, ref, rtol=1e-6)
    assert heat[2] > heat[1] > heat[0] and heat[2] > heat[3] > heat[4]


def test_diffusion_matches_hand_recurrence_on_blobs():
    rng = np.random.default_rng(11)
    for _ in range(20):
        member = random_blob(rng, 8, 8)
        c = brute_center(member)
        n = diffusion_iters(*member.shape)
        ref = hand_diffusion(member, c, n)
        got = _diffuse(np.pad(member, 1), c[0] + 1, c[1] + 1, n)[1:-1, 1:-1]
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-300)


def test_heat_positive_where_reachable():
    # heat spreads one pixel per iteration, so a member pixel is warm exactly
    # when its in-mask path distance to the center is within the iteration count
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(300):
        member = random_blob(rng)
        c = cell_center(member.astype(np.uint32), 1)
        n = diffusion_iters(*member.shape)
        heat = _diffuse(np.pad(member, 1), c[0] + 1, c[1] + 1, n)[1:-1, 1:-1]
        dist = bfs_dist(member, c)
        assert np.all(dist[member] >= 0)
        assert np.array_equal(heat > 0, member & (dist <= n))
        checked += int(dist.max() <= n)
        if dist.max() <= n:
            assert np.all(heat[member] > 0)
    assert checked > 250


def test_empty_mask_flow():
    t = label_to_flow(np.zeros((6, 7), np.uint32))
    assert not t.flow.any() and not t.cell_prob.any()
    assert t.flow.shape == (6, 7, 2) and t.cell_prob.shape == (6, 7)


def test_disc_flow_points_at_center():
    m = disc_mask(32, 8)
    t = label_to_flow(m)
    cy, cx = cell_center(m, 1)
    ys, xs = np.nonzero(m)
    for y, x in zip(ys, xs):
        if (y, x) == (cy, cx):
            continue
        v = t.flow[y, x]
        assert v[0] * (cy - y) + v[1] * (cx - x) > 0, (y, x)
    assert np.array_equal(t.cell_prob, (m > 0).astype(np.float32))
    assert not t.flow[m == 0].any()


def test_flow_locality_and_permutation():
    m = np.zeros((40, 60), np.uint32)
    m[disc(40, 60, 12, 15, 7)] = 1
    m[disc(40, 60, 25, 42, 10)] = 2
    full = label_to_flow(m).flow
    only = m.copy()
    only[only == 1] = 0
    alone = label_to_flow(only).flow
    assert np.array_equal(full[m == 2], alone[m == 2])
    swapped = np.where(m == 1, 7, np.where(m == 2, 3, 0)).astype(np.uint32)
    assert np.array_equal(label_to_flow(swapped).flow, full)


def test_flow_magnitude_and_permutation_on_random_masks():
    rng = np.random.default_rng(9)
    for _ in range(100):
        m = random_mask(rng, int(rng.integers(8, 48)), int(rng.integers(8, 48)), 8)
        t = label_to_flow(m)
        mag = np.sqrt((t.flow.astype(np.float64) ** 2).sum(2))
        assert mag.max(initial=0) <= 1 + 1e-5
        assert not t.flow[m == 0].any()
        ids = np.unique(m[m > 0])
        perm = dict(zip(ids.tolist(), rng.permutation(ids + 1000).tolist()))
        pm = np.vectorize(lambda v: perm.get(v, 0), otypes=[np.uint32])(m)
        assert np.array_equal(label_to_flow(pm).flow, t.flow)


def test_flow_error_examples():
    m = np.zeros((40, 40), np.uint32)
    m[disc(40, 40, 15, 18, 9)] = 4
    m[disc(40, 40, 33, 33, 4)] = 9
    ideal = label_to_flow(m).flow
    for e in flow_error(m, ideal).values():
        assert abs(e) < 1e-6
    zero = flow_error(m, np.zeros_like(ideal))
    neg = flow_error(m, -ideal)
    for i in (4, 9):
        v = ideal[m == i].astype(np.float64)
        expect = float(np.mean((v * v).sum(1)))
        assert math.isclose(zero[i], expect, rel_tol=1e-9)
        assert math.isclose(neg[i], 4 * expect, rel_tol=1e-6)
    with pytest.raises(ValueError):
        flow_error(m, np.zeros((40, 41, 2)))
    assert flow_error(np.zeros((3, 3), np.uint32), np.zeros((3, 3, 2))) == {}


def test_following_flows_reaches_center_for_convex_cells():
    rng = np.random.default_rng(21)
    cfg = TrackConfig()
    for _ in range(40):
        h = w = 64
        a = rng.uniform(3, 25)
        b = a * rng.uniform(0.5, 1.0)
        th = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[:h, :w]
        dy, dx = yy - 31.5, xx - 31.5
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        m = ((u / a) ** 2 + (v / b) ** 2 <= 1).astype(np.uint32)
        ends = follow_flows(label_to_flow(m).as_prediction(), cfg)
        cy, cx = cell_center(m, 1)
        d = np.hypot(ends[..., 0] - cy, ends[..., 1] - cx)[m > 0]
        assert d.max() <= 2.0, (a, b, th, d.max())
