import pytest
import torch

from FACEflow.modules.encoders import EncoderSettings, PoseEncoder, PoseParams, available_encoders, \
    build_encoder_suite, check_image, wrap_degrees
from FACEflow.modules.errors import ConformanceError, InvalidConfigError
from FACEflow.modules.generator import Generator


@pytest.fixture
def suite(desk_arch):
    return build_encoder_suite(EncoderSettings(resolution=32), Generator(desk_arch, mapping_layers=2))


@pytest.fixture
def images():
    return torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0)) * 2 - 1


def test_feature_shapes(suite, images):
    assert suite.encode_appearance(images).data.shape == (2, 512, 7, 7)
    assert suite.encode_pose(images[0]).data.shape == (1, 2048, 7, 7)


def test_encoders_are_deterministic(suite, images):
    assert torch.equal(suite.encode_appearance(images).data, suite.encode_appearance(images).data)
    assert torch.equal(suite.identity_embedding(images), suite.identity_embedding(images))
    assert torch.equal(suite.invert(images).styles, suite.invert(images).styles)


def test_distinct_images_give_distinct_appearance(suite, images):
    features = suite.encode_appearance(images).data
    assert torch.linalg.vector_norm(features[0] - features[1]) > 0


def test_pose_encoder_ignores_brightness_shift(images):
    encoder = PoseEncoder(normalize_input=True)
    assert torch.allclose(encoder(images), encoder(images + 0.1), atol=1e-3)


def test_identity_embedding_is_unit_norm(suite, images):
    embedding = suite.identity_embedding(images)
    assert torch.allclose(torch.linalg.vector_norm(embedding, dim=1), torch.ones(2), atol=1e-5)
    assert torch.allclose((embedding * embedding).sum(dim=1), torch.ones(2), atol=1e-5)


def test_inversion_has_one_row_per_style(suite, images, desk_arch):
    code = suite.invert(images)
    assert code.styles.shape == (2, desk_arch.num_styles, 512)
    assert code.styles.abs().max() <= 5.0


def test_oracle_returns_registered_parameters(suite, images):
    params = PoseParams.from_values([10, -5, 0], [0.5] * 50, [0.0] * 8, [0.1, -0.2])
    suite.pose_params.register(images[0], params)
    extracted = suite.extract_pose_params(images[0])
    assert torch.allclose(extracted.euler[0], torch.tensor([10.0, -5.0, 0.0]))
    assert torch.allclose(suite.estimate_gaze(images[0])[0], torch.tensor([0.1, -0.2]))
    assert extracted.expression_dim == 50


def test_regressor_handles_unregistered_images(suite, images):
    params = suite.extract_pose_params(images)
    assert params.euler.shape == (2, 3)
    assert torch.isfinite(params.flatten()).all()


def test_wrap_degrees():
    assert torch.allclose(wrap_degrees(torch.tensor([190.0, -190.0, 180.0, 0.0])),
                          torch.tensor([-170.0, 170.0, 180.0, 0.0]))


@pytest.mark.parametrize('shape', [(3, 32), (1, 32, 32), (2, 3, 16, 32), (4, 3, 4, 4)])
def test_check_image_rejects_bad_shapes(shape):
    with pytest.raises(ConformanceError):
        check_image(torch.zeros(shape))


def test_resolution_mismatch_is_rejected(suite):
    with pytest.raises(ConformanceError):
        suite.encode_appearance(torch.zeros(3, 16, 16))


def test_registry_lists_standins():
    assert {manifest.role for manifest in available_encoders()} >= {'appearance', 'pose', 'pose_params',
                                                                     'identity', 'inversion'}


def test_unknown_plugin_is_rejected(desk_arch):
    settings = EncoderSettings(plugins={'appearance': 'missing'})
    with pytest.raises(InvalidConfigError):
        build_encoder_suite(settings, Generator(desk_arch, mapping_layers=2))
