import numpy as np
import pytest
import torch

from gift.errors import DivergenceError, ValidationError
from gift.inversion import ToyPerceptual, invert, reconstruction_loss, reconstruction_terms
from gift.types import FaceImage, LatentCode, LatentSpace, OptimConfig

from gradcheck import probe_gradients


class FlatGenerator:
    """Renders a constant grey image whatever the code; enough for loss arithmetic."""

    dtype = torch.float32
    output_size = (16, 16)
    fingerprint = "flat"

    def __init__(self, level=0.3):
        self.level = level

    def render(self, components, space):
        return torch.full((16, 16, 3), self.level) + 0.0 * components["style"].sum()

    def check(self, code):
        pass

    def synthesize(self, code):
        return FaceImage(self.render(code.components, code.space))


def _flat_code():
    return LatentCode(LatentSpace.W, {"style": torch.zeros(4)}, "flat")


def test_zero_loss_on_exact_reconstruction(generator, perceptual):
    code = generator.init_latent("F", 0)
    with torch.no_grad():
        source = generator.synthesize(code)
        assert float(reconstruction_loss(generator, code, source, 10.0, perceptual)) == 0.0


def test_pure_mse_when_alpha_zero(perceptual):
    source = FaceImage(torch.full((16, 16, 3), 0.5))
    loss = reconstruction_loss(FlatGenerator(0.3), _flat_code(), source, 0.0, perceptual)
    assert float(loss) == pytest.approx(0.04, rel=1e-6)


def test_default_alpha_weights_terms(generator, perceptual):
    code = generator.init_latent("WPLUS", 1)
    source = FaceImage(torch.rand(64, 64, 3, generator=torch.Generator().manual_seed(5)))
    with torch.no_grad():
        recon = generator.render(code.components, code.space).clamp(0, 1)
        mse = float(((source.pixels - recon) ** 2).mean())
        per = float(((perceptual(source.pixels) - perceptual(recon)) ** 2).mean())
        total = float(reconstruction_loss(generator, code, source, OptimConfig().alpha, perceptual))
    assert total == pytest.approx(mse + 10 * per, rel=1e-6)


def test_shape_mismatch(generator, perceptual):
    with pytest.raises(ValidationError):
        reconstruction_terms(generator, generator.init_latent("W", 0), FaceImage(torch.rand(32, 32, 3)), perceptual)


@pytest.mark.parametrize("space", ["W", "WPLUS", "F"])
def test_gradient_matches_finite_differences(generator64, space):
    per64 = ToyPerceptual().to(torch.float64)
    code = generator64.init_latent(space, 3).detached(torch.float64)
    with torch.no_grad():
        source = generator64.synthesize(generator64.init_latent("WPLUS", 4).detached(torch.float64))

    def loss(comps):
        return reconstruction_loss(generator64, LatentCode(space, comps, code.generator_fingerprint),
                                   source, 10.0, per64)

    for name, idx, a, n, rel in probe_gradients(loss, dict(code.components), code.names, probes=20, seed=2):
        assert rel <= 1e-3, (name, idx, a, n)


def test_zero_steps_returns_warm_start(generator, perceptual):
    warm = generator.init_latent("F", 3)
    with torch.no_grad():
        source = generator.synthesize(generator.init_latent("F", 4))
    result = invert(generator, source, OptimConfig(t1_steps=0), perceptual, warm_start_code=warm)
    assert result.code.equal(warm)
    assert result.loss_trace == []
    assert result.recon.equal(generator.synthesize(warm))


def test_inversion_converges_and_is_deterministic(generator, perceptual):
    with torch.no_grad():
        source = generator.synthesize(generator.init_latent("WPLUS", 42))
    cfg = OptimConfig(t1_steps=300, space="F")
    warm = generator.init_latent("F", 7)
    a = invert(generator, source, cfg, perceptual, warm_start_code=warm)
    b = invert(generator, source, cfg, perceptual, warm_start_code=warm)
    assert a.loss_trace == b.loss_trace
    assert len(a.loss_trace) == 300
    assert a.final_loss < 0.1 * a.initial_loss
    assert a.final_loss <= a.initial_loss
    assert float(a.recon.pixels.min()) >= 0 and float(a.recon.pixels.max()) <= 1
    assert a.recon.equal(generator.synthesize(a.code))


def test_inversion_uses_encoder_warm_start(generator, perceptual):
    with torch.no_grad():
        source = generator.synthesize(generator.init_latent("WPLUS", 8))
    result = invert(generator, source, OptimConfig(t1_steps=5, space="F"), perceptual)
    enc = generator.encode(source, "F")
    first = reconstruction_loss(generator, enc, source, 10.0, perceptual)
    assert result.loss_trace[0][3] == pytest.approx(float(first), rel=1e-6)


def test_divergence_names_step(generator):
    class NaNPerceptual(torch.nn.Module):
        def forward(self, x):
            return x.flatten(1) * float("nan")

    with torch.no_grad():
        source = generator.synthesize(generator.init_latent("W", 0))
    with pytest.raises(DivergenceError) as err:
        invert(generator, source, OptimConfig(t1_steps=3, space="W"), NaNPerceptual(),
               warm_start_code=generator.init_latent("W", 1))
    assert err.value.step == 0


def test_windowed_trace_non_increasing(generator, perceptual):
    with torch.no_grad():
        source = generator.synthesize(generator.init_latent("WPLUS", 43))
    result = invert(generator, source, OptimConfig(t1_steps=120, space="WPLUS"), perceptual,
                    warm_start_code=generator.init_latent("WPLUS", 9))
    losses = np.array([t[3] for t in result.loss_trace])
    windowed = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(windowed) <= 0)
