"""Render a diffuse sphere, check the furnace identity, then compare adjoint and finite-difference gradients.

Run:  python demos/01_render_and_gradients.py
"""
import numpy as np

from metarender.diff import MAE, ParameterSet, render_loss, render_with_grad
from metarender.render.image import tonemap, write_png
from metarender.render.integrator import RenderSettings, render, render_full
from metarender.scene import (CameraSpec, ConstantEnv, ConstantRGB, Diffuse, MeshInstance, SceneDescription,
                              make_icosphere)


def ball(albedo, res=16):
    cam = CameraSpec([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 40.0, (res, res))
    return SceneDescription((MeshInstance("ball", make_icosphere(3), "m"),),
                            {"m": Diffuse(ConstantRGB(albedo))}, ConstantEnv((1.0, 1.0, 1.0)), (cam,)).validate()


# %% A grey ball in a uniform white environment reflects exactly its albedo
scene = ball((0.5, 0.5, 0.5))
res = render_full(scene, scene.cameras[0], RenderSettings(spp=256, max_depth=16))
on = res.coverage == 1.0
print("on-object mean radiance:", res.image.data[on].mean(0))
write_png("demo_ball.png", tonemap(res.image))

# %% Gradient of the MAE loss w.r.t. the albedo against a blue-ish target
target = render(ball((0.2, 0.5, 0.8)), scene.cameras[0], RenderSettings(spp=64, seed=9))
ps = ParameterSet.bsdf("m", scene, ["base_color"])
st = RenderSettings(spp=512, seed=3, max_depth=4)
g = render_with_grad(scene, ps, scene.cameras[0], st, MAE(), target).grads["m.base_color"]

h = 1e-3
for c in range(3):
    up, dn = ps["m.base_color"].value.copy(), ps["m.base_color"].value.copy()
    up[c] += h
    dn[c] -= h
    # same seed on both sides, so the noise cancels in the difference
    fd = (render_loss(scene, ps.with_values({"m.base_color": up}), scene.cameras[0], st, MAE(), target)
          - render_loss(scene, ps.with_values({"m.base_color": dn}), scene.cameras[0], st, MAE(), target)) / (2 * h)
    print(f"channel {c}: adjoint {g[c]:+.5f}  finite difference {fd:+.5f}")
