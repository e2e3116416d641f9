"""Independent reference implementations used to check the library.

Nothing here imports from metarender; each routine is a deliberately plain
(often loop-based) restatement of the quantity under test.
"""
import math

import numpy as np


def golden_points(n):
    ga = math.pi * (3.0 - math.sqrt(5.0))
    pts = []
    for i in range(n):
        y = 1.0 - 2.0 * (i + 0.5) / n
        r = math.sqrt(max(0.0, 1.0 - y * y))
        pts.append((math.cos(ga * i) * r, y, math.sin(ga * i) * r))
    return pts


def min_pairwise_angle(pts):
    best = math.pi
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            c = sum(a * b for a, b in zip(pts[i], pts[j]))
            best = min(best, math.acos(max(-1.0, min(1.0, c))))
    return best


def kendall_pairs(x, y):
    """Brute-force pair counts: (concordant, discordant, ties in x only, ties in y only, joint ties)."""
    c = d = tx = ty = txy = 0
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0 and dy == 0:
                txy += 1
            elif dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif (dx > 0) == (dy > 0):
                c += 1
            else:
                d += 1
    return c, d, tx, ty, txy


def _group_sizes(v):
    counts = {}
    for a in v:
        counts[a] = counts.get(a, 0) + 1
    return [t for t in counts.values() if t > 1]


def kendall_tau_b_reference(x, y):
    """Tau-b with the tie-corrected variance of S and a two-sided normal p-value."""
    n = len(x)
    c, d, tx, ty, txy = kendall_pairs(list(x), list(y))
    n0 = n * (n - 1) / 2
    n1 = sum(t * (t - 1) / 2 for t in _group_sizes(x))
    n2 = sum(t * (t - 1) / 2 for t in _group_sizes(y))
    s = c - d
    tau = s / math.sqrt((n0 - n1) * (n0 - n2))
    gx, gy = _group_sizes(x), _group_sizes(y)
    v0 = n * (n - 1) * (2 * n + 5)
    vt = sum(t * (t - 1) * (2 * t + 5) for t in gx)
    vu = sum(t * (t - 1) * (2 * t + 5) for t in gy)
    v1 = sum(t * (t - 1) for t in gx) * sum(u * (u - 1) for u in gy) / (2 * n * (n - 1))
    v2 = (sum(t * (t - 1) * (t - 2) for t in gx) * sum(u * (u - 1) * (u - 2) for u in gy)
          / (9 * n * (n - 1) * (n - 2)))
    var = (v0 - vt - vu) / 18 + v1 + v2
    z = s / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2))
    return tau, min(1.0, p), (c, d)


def chamfer_brute(a, b):
    """Sum of mean squared nearest-neighbour distances in both directions, by full distance matrix."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return d2.min(1).mean() + d2.min(0).mean()


def adam_reference(x0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop Adam over a list of gradient vectors."""
    x = list(map(float, x0))
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t, g in enumerate(grads, 1):
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            x[i] -= lr * mh / (math.sqrt(vh) + eps)
    return x


def central_difference(f, x, index, h):
    xp = np.array(x, float)
    xm = np.array(x, float)
    xp.flat[index] += h
    xm.flat[index] -= h
    return (f(xp) - f(xm)) / (2 * h)


def grid_laplacian_dense(n_vertices, faces):
    """Dense degree-minus-adjacency matrix built edge by edge."""
    L = np.zeros((n_vertices, n_vertices))
    seen = set()
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            e = (min(a, b), max(a, b))
            if e in seen:
                continue
            seen.add(e)
            L[e[0], e[1]] -= 1
            L[e[1], e[0]] -= 1
            L[e[0], e[0]] += 1
            L[e[1], e[1]] += 1
    return L


# (group, experiment, epoch, top sim, top base, rsa, significant, printed difference, listed among metamers)
REFERENCE_VERDICTS = [
    ('material', 'Aurora CLIP', 64, 0.883, 0.848, '1.000', 'Yes', '0.035', True),
    ('material', 'Aurora DINO', 127, 0.955, 0.914, '0.733', 'No', '0.041', True),
    ('material', 'Aurora LPIPS', 24, 0.969, 0.958, '-', '-', '0.011', True),
    ('material', 'Aurora ResNet-SIN', 45, 0.999, 0.999, '-', '-', '0.000', True),
    ('material', 'Aurora VGG', 25, 0.932, 0.910, '-', '-', '0.022', True),
    ('material', 'Brushed Metal CLIP', 122, 0.756, 0.731, '-0.067', 'No', '0.025', True),
    ('material', 'Brushed Metal DINO', 114, 0.811, 0.784, '0.600', 'No', '0.027', True),
    ('material', 'Brushed Metal LPIPS', 197, 0.920, 0.891, '-', '-', '0.029', True),
    ('material', 'Brushed Metal ResNet-SIN', 110, 0.998, 0.998, '-', '-', '0.000', True),
    ('material', 'Brushed Metal VGG', 199, 0.842, 0.771, '-', '-', '0.071', True),
    ('material', 'Diffuse DINO', 199, 0.795, 0.790, '0.467', 'No', '0.006', True),
    ('material', 'Diffuse LPIPS', 199, 0.884, 0.851, '-', '-', '0.033', True),
    ('material', 'Diffuse ResNet-SIN', 130, 0.998, 0.998, '-', '-', '0.000', True),
    ('material', 'Diffuse VGG', 199, 0.793, 0.690, '-', '-', '0.103', True),
    ('material', 'Translucent CLIP', 124, 0.706, 0.653, '-0.067', 'No', '0.054', True),
    ('material', 'Translucent DINO', 190, 0.771, 0.710, '0.333', 'No', '0.061', True),
    ('material', 'Translucent LPIPS', 88, 0.831, 0.810, '-', '-', '0.021', True),
    ('material', 'Translucent ResNet', 191, 0.973, 0.956, '-', '-', '0.016', True),
    ('material', 'Translucent ResNet-SIN', 94, 0.998, 0.998, '-', '-', '0.000', True),
    ('material', 'Translucent VGG', 60, 0.635, 0.600, '-', '-', '0.034', True),
    ('material', 'Aurora ResNet', 127, 0.993, 0.993, '-', '-', '-0.000', False),
    ('material', 'Brushed Metal ResNet', 138, 0.976, 0.977, '-', '-', '-0.001', False),
    ('material', 'Diffuse CLIP', 198, 0.738, 0.758, '0.600', 'No', '-0.020', False),
    ('material', 'Diffuse ResNet', 199, 0.965, 0.968, '-', '-', '-0.003', False),
    ('shape', 'Dog Garden LPIPS', 159, 0.991, 0.983, '-', '-', '0.008', True),
    ('shape', 'Dog Garden VGG', 164, 0.983, 0.963, '-', '-', '0.020', True),
    ('shape', 'Dog Hallstatt LPIPS', 158, 0.991, 0.991, '-', '-', '0.000', True),
    ('shape', 'Dog Hallstatt VGG', 258, 0.982, 0.979, '-', '-', '0.003', True),
    ('shape', 'Dog Skybox VGG', 499, 0.980, 0.835, '-', '-', '0.144', True),
    ('shape', 'Dragon Skybox LPIPS', 248, 0.798, 0.782, '-', '-', '0.016', True),
    ('shape', 'Dragon Skybox ResNet', 238, 0.953, 0.945, '0.536', 'Yes', '0.008', True),
    ('shape', 'Dragon Skybox VGG', 486, 0.578, 0.519, '-', '-', '0.058', True),
    ('shape', 'Lion Statue Hallstatt LPIPS', 348, 0.957, 0.956, '-', '-', '0.001', True),
    ('shape', 'Suzanne Garden LPIPS', 115, 0.986, 0.972, '-', '-', '0.015', True),
    ('shape', 'Suzanne Garden VGG', 118, 0.970, 0.937, '-', '-', '0.034', True),
    ('shape', 'Suzanne Hallstatt LPIPS', 159, 0.985, 0.979, '-', '-', '0.006', True),
    ('shape', 'Suzanne Hallstatt VGG', 101, 0.968, 0.953, '-', '-', '0.015', True),
    ('shape', 'Suzanne Skybox LPIPS', 236, 0.953, 0.933, '-', '-', '0.020', True),
    ('shape', 'Suzanne Skybox VGG', 158, 0.872, 0.849, '-', '-', '0.023', True),
    ('shape', 'Dog Garden CLIP', 390, 0.692, 0.901, '0.321', 'Yes', '-0.210', False),
    ('shape', 'Dog Garden DINO', 105, 0.711, 0.957, '0.737', 'Yes', '-0.246', False),
    ('shape', 'Dog Garden ResNet', 19, 0.964, 0.996, '0.621', 'Yes', '-0.032', False),
    ('shape', 'Dog Garden ResNet-SIN', 34, 0.998, 0.999, '0.036', 'No', '-0.001', False),
    ('shape', 'Dog Hallstatt CLIP', 30, 0.638, 0.919, '0.371', 'Yes', '-0.281', False),
    ('shape', 'Dog Hallstatt DINO', 86, 0.757, 0.966, '0.723', 'Yes', '-0.209', False),
    ('shape', 'Dog Hallstatt ResNet', 247, 0.980, 0.998, '0.811', 'Yes', '-0.018', False),
    ('shape', 'Dog Hallstatt ResNet-SIN', 1, 0.998, 0.999, '0.117', 'Yes', '-0.001', False),
    ('shape', 'Dog Skybox CLIP', 95, 0.567, 0.752, '0.214', 'Yes', '-0.185', False),
    ('shape', 'Dog Skybox DINO', 221, 0.544, 0.779, '0.371', 'Yes', '-0.234', False),
    ('shape', 'Dog Skybox LPIPS', 169, 0.902, 0.926, '-', '-', '-0.024', False),
    ('shape', 'Dog Skybox ResNet', 81, 0.945, 0.978, '0.530', 'Yes', '-0.032', False),
    ('shape', 'Dog Skybox ResNet-SIN', 81, 0.998, 0.998, '0.070', 'No', '-0.001', False),
    ('shape', 'Dragon Garden CLIP', 225, 0.639, 0.866, '0.298', 'Yes', '-0.228', False),
    ('shape', 'Dragon Garden DINO', 191, 0.740, 0.939, '0.737', 'Yes', '-0.199', False),
    ('shape', 'Dragon Garden LPIPS', 241, 0.972, 0.973, '-', '-', '-0.001', False),
    ('shape', 'Dragon Garden ResNet', 97, 0.972, 0.994, '0.672', 'Yes', '-0.023', False),
    ('shape', 'Dragon Garden ResNet-SIN', 244, 0.998, 0.999, '0.090', 'Yes', '-0.001', False),
    ('shape', 'Dragon Garden VGG', 493, 0.934, 0.942, '-', '-', '-0.008', False),
    ('shape', 'Dragon Hallstatt CLIP', 237, 0.648, 0.861, '0.144', 'Yes', '-0.214', False),
    ('shape', 'Dragon Hallstatt DINO', 334, 0.765, 0.934, '0.685', 'Yes', '-0.170', False),
    ('shape', 'Dragon Hallstatt LPIPS', 449, 0.973, 0.977, '-', '-', '-0.004', False),
    ('shape', 'Dragon Hallstatt ResNet', 130, 0.983, 0.995, '0.787', 'Yes', '-0.012', False),
    ('shape', 'Dragon Hallstatt ResNet-SIN', 71, 0.998, 0.999, '0.054', 'No', '-0.001', False),
    ('shape', 'Dragon Hallstatt VGG', 208, 0.939, 0.949, '-', '-', '-0.010', False),
    ('shape', 'Dragon Skybox CLIP', 100, 0.566, 0.612, '0.043', 'No', '-0.045', False),
    ('shape', 'Dragon Skybox DINO', 498, 0.596, 0.609, '0.438', 'Yes', '-0.014', False),
    ('shape', 'Dragon Skybox ResNet-SIN', 134, 0.998, 0.998, '0.031', 'No', '-0.000', False),
    ('shape', 'Lion Statue Garden CLIP', 485, 0.664, 0.821, '0.300', 'Yes', '-0.157', False),
    ('shape', 'Lion Statue Garden DINO', 327, 0.754, 0.889, '0.746', 'Yes', '-0.135', False),
    ('shape', 'Lion Statue Garden LPIPS', 154, 0.946, 0.956, '-', '-', '-0.010', False),
    ('shape', 'Lion Statue Garden ResNet', 56, 0.975, 0.990, '0.714', 'Yes', '-0.015', False),
    ('shape', 'Lion Statue Garden ResNet-SIN', 90, 0.998, 0.998, '0.129', 'Yes', '-0.001', False),
    ('shape', 'Lion Statue Garden VGG', 96, 0.875, 0.905, '-', '-', '-0.030', False),
    ('shape', 'Lion Statue Hallstatt CLIP', 63, 0.626, 0.806, '0.360', 'Yes', '-0.180', False),
    ('shape', 'Lion Statue Hallstatt DINO', 348, 0.751, 0.877, '0.675', 'Yes', '-0.126', False),
    ('shape', 'Lion Statue Hallstatt ResNet', 231, 0.987, 0.989, '0.829', 'Yes', '-0.002', False),
    ('shape', 'Lion Statue Hallstatt ResNet-SIN', 89, 0.998, 0.998, '0.191', 'Yes', '-0.001', False),
    ('shape', 'Lion Statue Hallstatt VGG', 262, 0.895, 0.904, '-', '-', '-0.009', False),
    ('shape', 'Lion Statue Skybox CLIP', 156, 0.577, 0.718, '0.285', 'Yes', '-0.141', False),
    ('shape', 'Lion Statue Skybox DINO', 278, 0.601, 0.752, '0.414', 'Yes', '-0.150', False),
    ('shape', 'Lion Statue Skybox LPIPS', 210, 0.896, 0.906, '-', '-', '-0.010', False),
    ('shape', 'Lion Statue Skybox ResNet', 234, 0.963, 0.980, '0.529', 'Yes', '-0.017', False),
    ('shape', 'Lion Statue Skybox ResNet-SIN', 158, 0.998, 0.998, '0.158', 'Yes', '-0.000', False),
    ('shape', 'Lion Statue Skybox VGG', 445, 0.764, 0.794, '-', '-', '-0.030', False),
    ('shape', 'Suzanne Garden CLIP', 212, 0.761, 0.861, '0.312', 'Yes', '-0.100', False),
    ('shape', 'Suzanne Garden DINO', 493, 0.880, 0.911, '0.878', 'Yes', '-0.031', False),
    ('shape', 'Suzanne Garden ResNet', 245, 0.995, 0.996, '0.937', 'Yes', '-0.001', False),
    ('shape', 'Suzanne Garden ResNet-SIN', 20, 0.998, 0.999, '0.254', 'No', '-0.001', False),
    ('shape', 'Suzanne Hallstatt CLIP', 136, 0.737, 0.876, '0.519', 'Yes', '-0.139', False),
    ('shape', 'Suzanne Hallstatt DINO', 450, 0.914, 0.935, '0.931', 'Yes', '-0.021', False),
    ('shape', 'Suzanne Hallstatt ResNet', 158, 0.995, 0.997, '0.910', 'Yes', '-0.002', False),
    ('shape', 'Suzanne Hallstatt ResNet-SIN', 15, 0.998, 0.999, '0.354', 'Yes', '-0.001', False),
    ('shape', 'Suzanne Skybox CLIP', 90, 0.640, 0.739, '0.196', 'No', '-0.099', False),
    ('shape', 'Suzanne Skybox DINO', 53, 0.672, 0.791, '0.709', 'Yes', '-0.119', False),
    ('shape', 'Suzanne Skybox ResNet', 49, 0.976, 0.980, '0.365', 'Yes', '-0.004', False),
    ('shape', 'Suzanne Skybox ResNet-SIN', 97, 0.998, 0.998, '0.407', 'Yes', '-0.000', False),
]
