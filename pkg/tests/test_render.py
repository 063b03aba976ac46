import numpy as np
import pytest

from gbx import accel
from gbx.gbuffer import validate
from gbx.render.brdf import MaterialParams
from gbx.render.raytrace import (camera_rays, furnace_environment,
                                 furnace_response, irradiance_at, render)
from gbx.render.scene import Box, Camera, Light, Plane, Scene, Sphere

from conftest import make_test_scene


class TestIrradiance:
    def test_directional_cosine_one(self):
        e = irradiance_at((0, 0, 0), (0, 1, 0), [Light.directional((0, 1, 0), (1, 1, 1))])
        assert np.allclose(e, 1.0)

    def test_light_below_horizon(self):
        e = irradiance_at((0, 0, 0), (0, 1, 0), [Light.directional((0, -1, 0), (5, 5, 5))])
        assert np.all(e == 0.0)

    def test_two_lights_additive(self):
        la = Light.directional((0, 1, 0), (1, 0.5, 0.25))
        lb = Light.directional((1, 1, 0), (0.5, 0.5, 0.5))
        ea = irradiance_at((0, 0, 0), (0, 1, 0), [la])
        eb = irradiance_at((0, 0, 0), (0, 1, 0), [lb])
        eab = irradiance_at((0, 0, 0), (0, 1, 0), [la, lb])
        assert np.array_equal(eab, ea + eb)

    def test_point_light_inverse_square(self):
        e1 = irradiance_at((0, 0, 0), (0, 1, 0), [Light.point((0, 2, 0), (4, 4, 4))])
        e2 = irradiance_at((0, 0, 0), (0, 1, 0), [Light.point((0, 4, 0), (4, 4, 4))])
        assert np.allclose(e1, 1.0)
        assert np.allclose(e2, 0.25)

    def test_shadowed_by_primitive(self):
        blocker = Sphere((0, 1.0, 0), 0.3, MaterialParams((1, 1, 1), 0.5, 0.0))
        sc = Scene((blocker,), (Light.directional((0, 1, 0), (1, 1, 1)),),
                   Camera((0, 2, 4), (0, 0, 0)))
        e = irradiance_at((0, 0, 0), (0, 1, 0), sc.lights, scene=sc)
        assert np.all(e == 0.0)


class TestFurnace:
    def test_white_furnace_closure(self):
        assert np.allclose(furnace_response((1, 1, 1), 4096), 1.0, atol=0.02)

    def test_gray_furnace_scales(self):
        assert np.allclose(furnace_response((0.25, 0.5, 0.75), 4096),
                           [0.25, 0.5, 0.75], atol=0.02)

    def test_irradiance_quadrature_through_shading_kernel(self):
        e = irradiance_at((0, 1, 0), (0, 1, 0), furnace_environment((0, 1, 0), 4096))
        assert np.allclose(e, np.pi, rtol=0.02)


class TestRender:
    def test_deterministic(self):
        sc = make_test_scene()
        a = render(sc, 32, 32)
        b = render(sc, 32, 32)
        assert np.array_equal(a.image, b.image)
        assert a.gbuffer.content_hash() == b.gbuffer.content_hash()

    def test_gbuffer_valid(self):
        r = render(make_test_scene(), 48, 48)
        validate(r.gbuffer)
        assert np.all(r.gbuffer.mask == 1.0)

    def test_diffuse_consistency(self):
        r = render(make_test_scene(), 48, 48)
        m0 = (r.gbuffer.metallic[0] == 0) & r.hit
        lam = np.moveaxis(r.gbuffer.albedo, 0, -1)[m0] * np.moveaxis(r.irradiance, 0, -1)[m0] / np.pi
        resid = np.moveaxis(r.image, 0, -1)[m0] - lam - np.moveaxis(r.specular, 0, -1)[m0]
        assert np.abs(resid).max() < 1e-6

    def test_light_linearity(self):
        la = Light.directional((-1, 1.2, 0.3), (3, 3, 3))
        lb = Light.point((1.5, 2.5, 1.0), (6, 5, 4))
        base = make_test_scene()
        sa = Scene(base.primitives, (la,), base.camera)
        sb = Scene(base.primitives, (lb,), base.camera)
        sab = Scene(base.primitives, (la, lb), base.camera)
        ra, rb, rab = render(sa, 32, 32), render(sb, 32, 32), render(sab, 32, 32)
        assert np.allclose(rab.image, ra.image + rb.image, atol=1e-12)
        assert np.array_equal(ra.gbuffer.normal_enc, rab.gbuffer.normal_enc)
        assert np.array_equal(ra.gbuffer.depth_norm, rab.gbuffer.depth_norm)

    def test_sphere_silhouette_normals(self):
        sph = Sphere((0, 0, 0), 1.0, MaterialParams((0.7, 0.7, 0.7), 0.5, 0.0))
        sc = Scene((sph,), (Light.directional((0, 0, 1), (1, 1, 1)),),
                   Camera((0, 0, 8), (0, 0, 0), fov_deg=18.0))
        r = render(sc, 64, 64)
        hit = r.hit
        inner = hit.copy()
        inner[1:-1, 1:-1] = (hit[1:-1, 1:-1] & hit[:-2, 1:-1] & hit[2:, 1:-1]
                             & hit[1:-1, :-2] & hit[1:-1, 2:])
        limb = hit & ~inner
        assert limb.sum() > 20
        _, dirs = camera_rays(sc.camera, 64, 64)
        from gbx.gbuffer import decode_normal
        n = decode_normal(np.moveaxis(r.gbuffer.normal_enc, 0, -1))[limb]
        v = -dirs.reshape(64, 64, 3)[limb]
        cos = np.abs(np.sum(n * v, axis=1))
        assert np.median(cos) < 0.25
        assert cos.max() < 0.5

    def test_empty_scene_background(self):
        sc = Scene((), (Light.directional((0, 1, 0), (1, 1, 1)),), Camera((0, 2, 4), (0, 0, 0)))
        r = render(sc, 16, 16)
        assert np.all(r.image == 0.0)
        assert np.all(r.gbuffer.depth_norm == 1.0)
        assert np.all(r.gbuffer.mask == 1.0)
        assert r.gbuffer.meta.degenerate_shading

    def test_box_face_normals(self):
        box = Box((0, 0, 0), (1, 1, 1), MaterialParams((0.5, 0.5, 0.5), 0.5, 0.0))
        sc = Scene((box,), (Light.directional((0, 0, 1), (1, 1, 1)),),
                   Camera((0, 0, 6), (0, 0, 0), fov_deg=25.0))
        r = render(sc, 32, 32)
        from gbx.gbuffer import decode_normal
        n = decode_normal(np.moveaxis(r.gbuffer.normal_enc, 0, -1))[r.hit]
        assert np.allclose(np.abs(n), [0, 0, 1], atol=1e-9)

    def test_shadow_cast_on_floor(self):
        floor = Plane((0, 0, 0), (0, 1, 0), MaterialParams((0.8, 0.8, 0.8), 0.9, 0.0))
        ball = Sphere((0, 1.0, 0), 0.5, MaterialParams((0.9, 0.1, 0.1), 0.5, 0.0))
        sc = Scene((floor, ball), (Light.directional((0, 1, 0), (2, 2, 2)),),
                   Camera((0, 3.5, 4.5), (0, 0.2, 0)))
        r = render(sc, 64, 64)
        floor_px = r.hit & (r.gbuffer.albedo[0] > 0.7)
        irr = r.irradiance[0][floor_px]
        assert irr.min() == 0.0 and irr.max() > 1.0  # umbra and lit floor coexist

    def test_backend_agreement(self, monkeypatch):
        backends = accel.get_backends()
        if "numba" not in backends:
            pytest.skip("numba backend unavailable")
        images = {}
        for name, mod in backends.items():
            monkeypatch.setattr(accel, "trace_rays", mod.trace_rays)
            monkeypatch.setattr(accel, "shade_hits", mod.shade_hits)
            images[name] = render(make_test_scene(), 32, 32).image
        assert np.allclose(images["numpy"], images["numba"], atol=1e-9)
