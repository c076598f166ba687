import numpy as np
import pytest
import torch
from torch import nn

from skinet.checkpoint import CheckpointError, checkpoint_hash, load_checkpoint, save_checkpoint
from skinet.classifier import (
    ClassifierConfig,
    build_classifier,
    classification_loss,
    clf_forward,
    clf_probs_batch,
    predict_labels,
    train_classifier,
)
from skinet.core import Image, ValidationError
from skinet.layers import MCDropout, ReLU, count_parameters, guided_relu, has_dropout, mc_dropout
from skinet.segnet import (
    ConstructionError,
    MultiResBlockSpec,
    ResPathSpec,
    SegNetConfig,
    TrainConfig,
    bce_loss,
    build_multires_block,
    build_res_path,
    build_segnet,
    seg_forward,
    seg_forward_batch,
    train_segnet,
)
from synthetic import clf_arrays, seg_arrays

SMALL_SEG = SegNetConfig(input_shape=(32, 32, 3), base_W=6)
DESK = ClassifierConfig(backbone="desk_cnn", input_shape=(32, 32, 3), desk_widths=(4, 8, 8, 8))


# --------------------------------------------------------------------------- layers


def test_mc_dropout_identity_in_eval_without_context():
    d = MCDropout(0.5).eval()
    x = torch.ones(2, 3, 4, 4)
    assert torch.equal(d(x), x)


def test_mc_dropout_seeded_rows_are_reproducible_and_independent():
    d = MCDropout(0.5).eval()
    x = torch.ones(3, 2, 8, 8)
    with mc_dropout([1, 2, 1]):
        a = d(x)
    with mc_dropout([1, 2, 1]):
        b = d(x)
    assert torch.equal(a, b)
    assert torch.equal(a[0], a[2]) and not torch.equal(a[0], a[1])
    assert set(torch.unique(a).tolist()) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        with mc_dropout([1]):
            d(x)


def test_mc_dropout_rate_zero_is_identity_inside_context():
    d = MCDropout(0.0).eval()
    x = torch.rand(2, 3, 4, 4)
    with mc_dropout([0, 1]):
        assert torch.equal(d(x), x)


def test_guided_relu_backward_rule():
    x = torch.tensor([-1.0, 2.0, 3.0], requires_grad=True)
    g = torch.tensor([5.0, -4.0, 6.0])
    relu = ReLU()
    (plain,) = torch.autograd.grad(relu(x), x, g)
    assert plain.tolist() == [0.0, -4.0, 6.0]
    with guided_relu():
        (guided,) = torch.autograd.grad(relu(x), x, g)
    assert guided.tolist() == [0.0, 0.0, 6.0]


# --------------------------------------------------------------------------- segmenter


def test_multires_block_split_and_shape():
    spec = MultiResBlockSpec.from_budget(3, 32)
    assert spec.resolved() == ((5, 10, 17), 32)
    block = build_multires_block(spec)
    assert block(torch.rand(2, 3, 8, 8)).shape == (2, 32, 8, 8)
    with pytest.raises(ConstructionError):
        build_multires_block(MultiResBlockSpec(3, 4))
    with pytest.raises(ConstructionError):
        build_multires_block(MultiResBlockSpec(3, 12, (2, 4, 6), 10))


def test_res_path_length_and_shape():
    path = build_res_path(ResPathSpec(8, 8, 3))
    assert len(path) == 3
    assert path(torch.rand(1, 8, 6, 6)).shape == (1, 8, 6, 6)
    with pytest.raises(ConstructionError):
        build_res_path(ResPathSpec(8, 8, 0))


def test_res_path_schedule_at_default_width():
    specs = SegNetConfig().res_path_specs()
    assert [(s.filters, s.length) for s in specs] == [(32, 4), (64, 3), (128, 2), (256, 1)]


def test_segnet_output_is_probability_map_of_input_size():
    model = build_segnet(SMALL_SEG)
    assert has_dropout(model)
    maps = seg_forward_batch(model, [np.random.default_rng(0).random((32, 32, 3))] * 2)
    assert maps.shape == (2, 32, 32)
    assert maps.min() >= 0 and maps.max() <= 1


def test_segnet_rejects_indivisible_input_and_wrong_image_shape():
    with pytest.raises(ConstructionError):
        build_segnet(SegNetConfig(input_shape=(30, 30, 3), base_W=6))
    model = build_segnet(SMALL_SEG)
    with pytest.raises(ValidationError):
        seg_forward(model, Image(np.zeros((16, 16, 3))))


def test_segnet_deterministic_in_eval_and_stochastic_with_seeds():
    model = build_segnet(SMALL_SEG)
    img = Image(np.random.default_rng(1).random((32, 32, 3)))
    assert np.array_equal(seg_forward(model, img), seg_forward(model, img))
    a = seg_forward(model, img, stochastic=True, seed=1)
    b = seg_forward(model, img, stochastic=True, seed=1)
    c = seg_forward(model, img, stochastic=True, seed=2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_unet_baseline_builds():
    model = build_segnet(SegNetConfig(input_shape=(16, 16, 3), base_W=4, architecture="unet"))
    assert seg_forward_batch(model, [np.zeros((16, 16, 3))]).shape == (1, 16, 16)


def test_bce_loss_matches_torch():
    p = torch.rand(2, 1, 4, 4) * 0.98 + 0.01
    t = (torch.rand(2, 1, 4, 4) > 0.5).float()
    assert bce_loss(p, t).item() == pytest.approx(nn.functional.binary_cross_entropy(p, t).item(), rel=1e-5)


def test_train_segnet_records_history_and_marks_trained():
    images, masks = seg_arrays(4, 32)
    model = build_segnet(SMALL_SEG)
    model, hist = train_segnet(model, (images, masks), cfg=TrainConfig(epochs=2, batch_size=2), seed=0)
    assert model.trained and len(hist.records) == 2
    assert set(hist.records[0]) == {"epoch", "loss", "train_dice", "train_jaccard", "val_dice", "val_jaccard"}
    with pytest.raises(ValidationError):
        train_segnet(build_segnet(SMALL_SEG), (images[:0], masks[:0]))


# --------------------------------------------------------------------------- classifier


def test_reference_backbones_match_torchvision_parameter_counts():
    tv = pytest.importorskip("torchvision.models")
    for backbone, ref in (("resnet50_style", tv.resnet50), ("densenet169_style", tv.densenet169)):
        ours = build_classifier(ClassifierConfig(backbone=backbone, dropout_rate=0.5))
        assert count_parameters(ours) == count_parameters(ref(num_classes=7)), backbone


def test_classifier_dropout_positions():
    model = build_classifier(DESK)
    names = [n for n, _ in model.features.named_children()]
    assert names == ["stage1", "drop_stage1", "stage2", "drop_stage2", "stage3", "drop_stage3", "stage4", "drop_stage4"]
    head = build_classifier(ClassifierConfig(backbone="desk_cnn", dropout_positions="before_head",
                                             input_shape=(32, 32, 3), desk_widths=(4, 8, 8, 8)))
    assert isinstance(head.head_dropout, MCDropout)
    with pytest.raises(ConstructionError):
        build_classifier(ClassifierConfig(backbone="desk_cnn", dropout_positions=("nowhere",)))
    with pytest.raises(ConstructionError):
        build_classifier(ClassifierConfig(backbone="desk_cnn", dropout_positions="after_dense_blocks"))


def test_classifier_config_validation():
    with pytest.raises(ValidationError):
        ClassifierConfig(backbone="vgg")
    with pytest.raises(ValidationError):
        ClassifierConfig(num_classes=3)
    with pytest.raises(ValidationError):
        ClassifierConfig(dropout_rate=1.0)


def test_classifier_outputs_simplex_and_seeded_sampling():
    model = build_classifier(DESK)
    img = Image(np.random.default_rng(0).random((32, 32, 3)))
    p = clf_forward(model, img)
    assert p.probs.shape == (7,) and abs(p.probs.sum() - 1) < 1e-9
    a = clf_probs_batch(model, [img, img], seeds=[3, 3])
    assert np.array_equal(a[0], a[1])
    with pytest.raises(ValidationError):
        clf_forward(model, Image(np.zeros((16, 16, 3))))


def test_classification_loss_variants():
    logits = torch.randn(4, 7)
    labels = torch.tensor([0, 3, 6, 1])
    assert classification_loss(logits, labels, "categorical").item() == pytest.approx(
        nn.functional.cross_entropy(logits, labels).item()
    )
    probs = torch.softmax(logits, 1)
    onehot = nn.functional.one_hot(labels, 7).float()
    ref = nn.functional.binary_cross_entropy(probs, onehot).item()
    assert classification_loss(logits, labels, "bce").item() == pytest.approx(ref, rel=1e-5)


def test_train_classifier_with_balancing():
    images, labels = clf_arrays(9, 32)
    model, hist = train_classifier(build_classifier(DESK), (images, labels),
                                   cfg=TrainConfig(epochs=2, batch_size=8), seed=0)
    assert model.trained and len(hist.records) == 2
    assert predict_labels(model, images).shape == (9,)
    with pytest.raises(ValidationError):
        train_classifier(build_classifier(DESK), (images, labels + 7), cfg=TrainConfig(epochs=1))


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_is_exact(tmp_path):
    for model in (build_segnet(SMALL_SEG), build_classifier(DESK)):
        model.trained = True
        d = save_checkpoint(model, tmp_path / type(model).__name__)
        loaded = load_checkpoint(d, expected=model.cfg)
        assert loaded.cfg == model.cfg and loaded.trained
        for (k, v), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert k == k2 and torch.equal(v, v2)
        h = checkpoint_hash(d)
        save_checkpoint(loaded, tmp_path / "again")
        assert checkpoint_hash(tmp_path / "again") == h


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    d = save_checkpoint(build_classifier(DESK), tmp_path / "clf")
    with pytest.raises(CheckpointError):
        load_checkpoint(d, expected=ClassifierConfig(backbone="desk_cnn"))
    (d / "labels.txt").write_text("A\nB\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(d)
