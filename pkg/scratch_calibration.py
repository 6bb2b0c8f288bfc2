"""Prototype the calibration-efficacy acceptance geometry and measure runtime."""
import time

import numpy as np

from sslvit.fewshot import (ClassStatistics, Episode, FewshotConfig, episode_rng,
                            fit_logistic, run_episode)


def make_family(d=8, num_base=20, seed=1234, mean_scale=1.0, eig_lo=0.4, eig_hi=1.2):
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_base, d)) * mean_scale
    stats = []
    for i in range(num_base):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        w = rng.uniform(eig_lo, eig_hi, size=d)
        cov = (q * w) @ q.T
        cov = (cov + cov.T) / 2
        stats.append(ClassStatistics(i, means[i], cov, count=1000))
    return stats


def sample_task(stats, rng, way=5, shot=1, qpc=15, offset=0.5):
    d = len(stats[0].mean)
    picks = rng.choice(len(stats), size=way, replace=False)
    sx, sy, qx, qy = [], [], [], []
    for label, b in enumerate(picks):
        mu = stats[b].mean + offset * rng.standard_normal(d)
        chol = np.linalg.cholesky(stats[b].covariance)
        sx.append(mu + rng.standard_normal((shot, d)) @ chol.T)
        sy.append(np.full(shot, label))
        qx.append(mu + rng.standard_normal((qpc, d)) @ chol.T)
        qy.append(np.full(qpc, label))
    return Episode(way=way, shot=shot, query_per_class=qpc,
                   support_x=np.concatenate(sx), support_y=np.concatenate(sy),
                   query_x=np.concatenate(qx), query_y=np.concatenate(qy))


def bench_one_fit(stats, l2):
    rng = episode_rng(1, 0)
    ep = sample_task(stats, rng)
    cfg = FewshotConfig(k=2, alpha=0.21, n_augment=750, l2=l2)
    t0 = time.time()
    acc = run_episode(ep, stats, cfg, rng)
    dt = time.time() - t0
    # measure iterations on a comparable direct fit
    xs = [ep.support_x]
    ys = [ep.support_y]
    from sslvit.fewshot import calibrate, sample_augmented
    for i, (x, y) in enumerate(zip(ep.support_x, ep.support_y)):
        dist = calibrate(x, stats, 2, 0.21)
        xs.append(sample_augmented(dist, 750, rng))
        ys.append(np.full(750, y))
    m = fit_logistic(np.concatenate(xs), np.concatenate(ys), l2)
    print(f"  l2={l2}: one calibrated episode {dt*1000:.0f} ms, fit iters={m.iterations}")


def trial(num_tasks, mean_scale, offset, l2, master=777):
    stats = make_family(mean_scale=mean_scale)
    cal_cfg = FewshotConfig(k=2, alpha=0.21, n_augment=750, l2=l2)
    base_cfg = FewshotConfig(n_augment=0, l2=l2)
    accs_c, accs_b = [], []
    t0 = time.time()
    for i in range(num_tasks):
        rng = episode_rng(master, i)
        ep = sample_task(stats, rng, offset=offset)
        accs_c.append(run_episode(ep, stats, cal_cfg, rng))
        accs_b.append(run_episode(ep, stats, base_cfg, rng))
    dt = time.time() - t0
    c, b = np.mean(accs_c), np.mean(accs_b)
    print(f"scale={mean_scale} offset={offset} l2={l2}: cal={c:.4f} base={b:.4f} "
          f"gap={100*(c-b):.2f}pts  ({dt:.1f}s, {dt/num_tasks*1000:.0f} ms/task)")
    return c, b, dt


if __name__ == "__main__":
    stats = make_family()
    print("fit benchmarks:")
    for l2 in (1e-3, 1e-2, 3e-2):
        bench_one_fit(stats, l2)
    print("geometry grid (60 tasks each):")
    for scale, off, l2 in [(1.0, 0.5, 1e-2), (1.2, 0.6, 1e-2), (1.5, 0.8, 1e-2),
                           (1.2, 0.6, 3e-2)]:
        trial(60, scale, off, l2)
