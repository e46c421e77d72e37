import hashlib
import threading
from pathlib import Path

import pytest
import torch

from gift.errors import IncompatibleLatentError, UnsupportedCombinationError, ValidationError
from gift.generator import ToyGenerator, component_mask, style_names
from gift.types import LatentCode, LatentSpace, SearchMode, to_uint8

from gradcheck import probe_gradients

GOLDEN = Path(__file__).parent / "golden" / "toy_w_seed0.sha256"


def test_layouts(generator):
    assert generator.layer_count == 8 and generator.style_dim == 64 and generator.split_layer == 4
    assert generator.layout("W") == {"style": (64,)}
    assert list(generator.layout("WPLUS")) == style_names(1, 8)
    f = generator.layout("F")
    assert list(f) == ["feature"] + style_names(5, 8)
    assert f["feature"] == generator.feature_shape


def test_golden_image_hash(generator):
    with torch.no_grad():
        img = generator.synthesize(generator.init_latent("W", 0))
    assert img.size == (64, 64)
    assert hashlib.sha256(to_uint8(img).tobytes()).hexdigest() == GOLDEN.read_text().strip()


def test_synthesize_deterministic_and_pure(generator):
    code = generator.init_latent("F", 3)
    state = {k: v.clone() for k, v in generator.state_dict().items()}
    a = generator.synthesize(code)
    b = generator.synthesize(code)
    assert a.equal(b)
    assert all(torch.equal(state[k], v) for k, v in generator.state_dict().items())


def test_w_broadcast_matches_wplus(generator):
    w = generator.init_latent("W", 5)
    wplus = LatentCode(
        LatentSpace.WPLUS, {n: w["style"].clone() for n in style_names(1, 8)}, generator.fingerprint
    )
    assert generator.synthesize(w).equal(generator.synthesize(wplus))


def test_init_latent_seeds(generator):
    assert generator.init_latent("WPLUS", 1).equal(generator.init_latent("WPLUS", 1))
    assert not generator.init_latent("WPLUS", 1).equal(generator.init_latent("WPLUS", 2))
    f = generator.init_latent("F", 0)
    assert f.names == ["feature"] + style_names(5, 8)


def test_layout_mismatch_rejected(generator):
    bad = LatentCode(LatentSpace.W, {"style": torch.zeros(32)}, generator.fingerprint)
    with pytest.raises(IncompatibleLatentError):
        generator.synthesize(bad)
    other = ToyGenerator(seed=1)
    with pytest.raises(IncompatibleLatentError):
        generator.synthesize(other.init_latent("W", 0))


def test_float64_copy_keeps_fingerprint(generator, generator64):
    assert generator64.fingerprint == generator.fingerprint
    code = generator.init_latent("W", 0)
    a = generator.synthesize(code).pixels.double()
    b = generator64.synthesize(code).pixels
    assert torch.allclose(a, b, atol=1e-5)


def test_concurrent_synthesis_is_safe(generator):
    codes = [generator.init_latent("F", s) for s in range(4)]
    with torch.no_grad():
        expected = [generator.synthesize(c).pixels for c in codes]
    results = [None] * 4

    def work(i):
        with torch.no_grad():
            results[i] = generator.synthesize(codes[i]).pixels

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(torch.equal(r, e) for r, e in zip(results, expected))


def test_component_mask_gals_all_on(generator):
    mask = component_mask(generator.init_latent("F", 0), "GALS", 8)
    assert mask.active == ["feature"] + style_names(5, 8)


def test_component_mask_lals_wplus(generator):
    mask = component_mask(generator.init_latent("WPLUS", 0), SearchMode.LALS, 8)
    assert mask.frozen == style_names(1, 4)
    assert mask.active == style_names(5, 8)


def test_component_mask_lals_on_w_rejected(generator):
    with pytest.raises(UnsupportedCombinationError):
        component_mask(generator.init_latent("W", 0), "LALS", 8)


@pytest.mark.parametrize("space", ["WPLUS", "F"])
def test_gals_strict_superset_of_lals(generator, space):
    code = generator.init_latent(space, 0)
    gals = set(component_mask(code, "GALS", 8).active)
    lals = set(component_mask(code, "LALS", 8).active)
    assert lals < gals


@pytest.mark.parametrize("layers", [2, 4, 6])
def test_superset_for_other_depths(layers):
    gen = ToyGenerator(seed=0, layer_count=layers, channels=8, style_dim=8)
    code = gen.init_latent("WPLUS", 0)
    assert set(component_mask(code, "LALS", layers).active) < set(component_mask(code, "GALS", layers).active)


@pytest.mark.parametrize("space", ["W", "WPLUS", "F"])
def test_gradient_matches_finite_differences(generator64, space):
    code = generator64.init_latent(space, 11).detached(torch.float64)
    names = code.names

    def loss(comps):
        return generator64.render(comps, space).mean()

    for name, idx, a, n, rel in probe_gradients(loss, dict(code.components), names, probes=20, seed=1):
        assert rel <= 1e-3, (name, idx, a, n)


def test_encode_round_trip(generator):
    code = generator.init_latent("WPLUS", 9)
    with torch.no_grad():
        image = generator.synthesize(code)
    enc = generator.encode(image, "F")
    assert generator.encode(image, "F").equal(enc)
    with torch.no_grad():
        recon = generator.synthesize(enc)
    mse = float(((recon.pixels - image.pixels) ** 2).mean())
    assert mse < generator.encoder_tolerance[enc.space]


def test_encode_wrong_resolution(generator):
    from gift.types import FaceImage

    with pytest.raises(ValidationError):
        generator.encode(FaceImage(torch.rand(32, 32, 3)), "F")
