"""
Siamese relative pose regressor.

Two branches with one shared parameter set map each image of a pair to a feature
vector; the two vectors are concatenated (image 1 first) and fed to two parallel
affine heads, FC1 (4 outputs, relative orientation) and FC2 (3 outputs, relative
translation direction). Raw outputs are trained with

    L = ||t_gt - t||_2 + beta * ||q_gt - q||_2

and normalized to unit length only at prediction time.

Presets (branch layers; "conv" is convB[N, w, s, p] = convolution + ReLU):

    cnnA     conv[96,11,4,0] pool[3,2] conv[256,5,1,2] pool[3,2] conv[384,3,1,1]
             conv[384,3,1,1] conv[256,3,1,1] pool[3,2]               227 -> 6x6x256
    cnnB     cnnA without the last pool                              227 -> 13x13x256
    cnnAspp  cnnA + SPP{1,2,3,6}                                     any size
    cnnBspp  cnnB + SPP{1,2,3,6,13}                                  any size
    tiny     conv[16,5,2,0] pool[3,2] conv[32,3,1,1] SPP{1,2,4}      64x64 -> 672
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

import nnet
import synthdata
import util
from geom import RelativePose, roe, rte
from nnet import ConvSpec, PoolSpec, SppSpec, Tensor
from util import RelPoseError

logger = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "train_loss", "val_median_roe_deg", "val_median_rte_deg"]
PREDICT_BATCH = 32


class RegressorError(RelPoseError):
    module = "regressor"


class ConfigInvalidError(RegressorError):
    pass


class NonFiniteLossError(RegressorError):
    pass


class ShapeMismatchOnLoadError(RegressorError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """
    :param name: preset name
    :param layers: branch layers, ConvSpec (followed by ReLU) or PoolSpec
    :param spp: pyramid pooling after the last layer; None means flatten (fixed input size)
    :param input_size: training crop size; the only accepted size without SPP
    :param test_size: center crop used at test time (0: no crop, SPP presets only)
    :param resize_to: images are resized so their smaller side has this length
    :param beta: orientation weight of the loss
    """

    name: str
    layers: tuple
    spp: Optional[SppSpec] = None
    input_size: int = 227
    test_size: int = 227
    resize_to: int = 323
    in_channels: int = 3
    beta: float = 10.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigInvalidError(f"beta must be positive, got {self.beta}")
        if self.spp is None and self.test_size != self.input_size:
            raise ConfigInvalidError(
                f"{self.name}: without SPP the test size must equal the input size {self.input_size}"
            )

    @property
    def variable_input(self):
        return self.spp is not None

    def feature_map(self, height, width=None):
        """
        Branch feature map (channels, h, w) before SPP/flatten for a given image size.

        :raises ConfigInvalidError: when a layer does not fit
        """
        h, w = height, width if width is not None else height
        c = self.in_channels
        for layer in self.layers:
            if isinstance(layer, ConvSpec):
                h = nnet.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                w = nnet.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
                c = layer.filters
            else:
                h = nnet.pool_output_size(h, layer.kernel, layer.stride)
                w = nnet.pool_output_size(w, layer.kernel, layer.stride)
            if h < 1 or w < 1:
                raise ConfigInvalidError(f"{self.name}: input {height}x{width or height} too small at {layer}")
        if self.spp is not None and min(h, w) < self.spp.levels[-1]:
            raise ConfigInvalidError(
                f"{self.name}: feature map {h}x{w} smaller than SPP level {self.spp.levels[-1]}"
            )
        return c, h, w

    def branch_length(self, size=None):
        c, h, w = self.feature_map(size or self.input_size)
        return c * self.spp.bins if self.spp is not None else c * h * w

    @property
    def head_width(self):
        return 2 * self.branch_length()

    def crop_policy(self, train):
        if train:
            return synthdata.CropPolicy(self.resize_to, self.input_size, random=True)
        return synthdata.CropPolicy(self.resize_to, self.test_size, random=False)


_CNN_A = (
    ConvSpec(96, 11, 4, 0),
    PoolSpec(3, 2),
    ConvSpec(256, 5, 1, 2),
    PoolSpec(3, 2),
    ConvSpec(384, 3, 1, 1),
    ConvSpec(384, 3, 1, 1),
    ConvSpec(256, 3, 1, 1),
    PoolSpec(3, 2),
)

PRESETS = {
    "cnnA": ModelConfig("cnnA", _CNN_A),
    "cnnB": ModelConfig("cnnB", _CNN_A[:-1]),
    "cnnAspp": ModelConfig("cnnAspp", _CNN_A, SppSpec((1, 2, 3, 6)), input_size=323),
    "cnnBspp": ModelConfig("cnnBspp", _CNN_A[:-1], SppSpec((1, 2, 3, 6, 13)), input_size=323),
    "tiny": ModelConfig(
        "tiny",
        (ConvSpec(16, 5, 2, 0), PoolSpec(3, 2), ConvSpec(32, 3, 1, 1)),
        SppSpec((1, 2, 4)),
        input_size=64,
        test_size=64,
        resize_to=64,
    ),
}


def get_preset(name, beta=None):
    if name not in PRESETS:
        raise ConfigInvalidError(f"unknown preset {name!r}; choose one of {sorted(PRESETS)}")
    config = PRESETS[name]
    if beta is not None:
        config = replace(config, beta=float(beta))
    return config


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 128
    epochs: int = 15
    seed: int = 0
    beta: float = 10.0
    solver: str = "adam"
    momentum: float = 0.9

    def __post_init__(self):
        if self.solver not in ("adam", "sgd"):
            raise ConfigInvalidError(f"unknown solver {self.solver!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0 or not self.beta > 0:
            raise ConfigInvalidError(f"invalid training configuration {asdict(self)}")


class EpochLog(NamedTuple):
    epoch: int
    train_loss: float
    val_median_roe_deg: float
    val_median_rte_deg: float


class SiameseModel:
    """
    Shared branch parameters plus the FC1/FC2 heads. Both branches read the
    very same Tensor objects, so their gradients accumulate in one place.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.optimizer_state = None

    def branch_names(self):
        return [n for n in self.params if n.startswith("branch.")]

    def branch(self, x):
        """Feature vectors (B, D) of a batch of images."""
        for i, layer in enumerate(self.config.layers):
            if isinstance(layer, ConvSpec):
                x = nnet.conv2d(x, self.params[f"branch.{i}.weight"], self.params[f"branch.{i}.bias"], layer)
                x = nnet.relu(x)
            else:
                x = nnet.maxpool2d(x, layer)
        if self.config.spp is not None:
            return nnet.spp(x, self.config.spp)
        return nnet.flatten(x)

    def arrays(self):
        return [t.data for t in self.params.values()]

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def build_model(config, seed=0):
    """
    Builds a model with fan-in scaled uniform initialization: convolutions use
    U(-sqrt(6/fan_in), sqrt(6/fan_in)), the heads U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    biases start at 0. Every tensor draws from its own seeded stream.
    """
    head_width = config.head_width  # validates the declared input size
    params = {}
    c = config.in_channels
    for i, layer in enumerate(config.layers):
        if not isinstance(layer, ConvSpec):
            continue
        fan_in = c * layer.kernel * layer.kernel
        bound = math.sqrt(6.0 / fan_in)
        rng = util.make_rng(seed, "init", f"branch.{i}.weight")
        params[f"branch.{i}.weight"] = rng.uniform(-bound, bound, (layer.filters, c, layer.kernel, layer.kernel))
        params[f"branch.{i}.bias"] = np.zeros(layer.filters)
        c = layer.filters
    bound = 1.0 / math.sqrt(head_width)
    for name, out in (("fc1", 4), ("fc2", 3)):
        rng = util.make_rng(seed, "init", f"{name}.weight")
        params[f"{name}.weight"] = rng.uniform(-bound, bound, (out, head_width))
        params[f"{name}.bias"] = np.zeros(out)
    logger.debug(f"Built {config.name} with {sum(p.size for p in params.values())} parameters")
    return SiameseModel(config, {n: Tensor(p, requires_grad=True) for n, p in params.items()})


def _check_images(model, img):
    if img.ndim != 4 or img.shape[1] != model.config.in_channels:
        raise nnet.ShapeMismatchError(f"expected images (B, {model.config.in_channels}, H, W), got {img.shape}")
    h, w = img.shape[2], img.shape[3]
    if not model.config.variable_input and (h, w) != (model.config.input_size, model.config.input_size):
        raise nnet.ShapeMismatchError(
            f"{model.config.name} accepts only {model.config.input_size}x{model.config.input_size} images, got {h}x{w}"
        )
    try:
        model.config.feature_map(h, w)
    except ConfigInvalidError as e:
        raise nnet.ShapeMismatchError(str(e)) from e


def forward_pair(model, img1, img2):
    """
    Raw 7-vector [dq, dt] per pair, without normalization.

    :param img1: images (B, C, H, W) of the first views (array or Tensor)
    :param img2: images of the second views, same shape
    :return: Tensor (B, 7)
    """
    img1 = img1 if isinstance(img1, Tensor) else Tensor(img1)
    img2 = img2 if isinstance(img2, Tensor) else Tensor(img2)
    if img1.shape != img2.shape:
        raise nnet.ShapeMismatchError(f"pair images differ in shape: {img1.shape} vs {img2.shape}")
    _check_images(model, img1.data)
    features = nnet.concat([model.branch(img1), model.branch(img2)], axis=1)
    p = model.params
    q = nnet.linear(features, p["fc1.weight"], p["fc1.bias"])
    t = nnet.linear(features, p["fc2.weight"], p["fc2.bias"])
    return nnet.concat([q, t], axis=1)


def pose_loss(pred, gt, beta=10.0):
    """
    Batch mean of ||t_gt - t|| + beta ||q_gt - q|| (Euclidean, not squared).

    :param pred: Tensor (B, 7) or (7,) of raw predictions
    :param gt: array (B, 7) / (7,) or a RelativePose
    :return: scalar Tensor
    """
    if isinstance(gt, RelativePose):
        gt = gt.as_vector()
    gt = np.asarray(gt, dtype=np.float64)
    if pred.data.ndim == 1:
        pred = pred.reshape(1, -1)
        gt = gt.reshape(1, -1)
    t_term = nnet.euclidean_loss(pred.columns(4, 7), gt[:, 4:7], axis=-1)
    q_term = nnet.euclidean_loss(pred.columns(0, 4), gt[:, 0:4], axis=-1)
    return (t_term + q_term * beta).mean()


def predict(model, img1, img2):
    """
    Normalized relative pose(s) for image pair(s).

    :param img1: (C, H, W) image or (B, C, H, W) batch
    :param img2: same shape as img1
    :return: a RelativePose, or a list of them for batches
    """
    single = np.ndim(img1) == 3
    if single:
        img1, img2 = img1[None], img2[None]
    raw = forward_pair(model, np.asarray(img1, dtype=np.float64), np.asarray(img2, dtype=np.float64)).data
    poses = [RelativePose.from_vector(row) for row in raw]
    return poses[0] if single else poses


def _grad_or_zeros(t):
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def _median(values):
    return float(np.median(values)) if len(values) else float("nan")


class PairImages:
    """
    Loads and caches the resized images of a manifest; crops per request.
    """

    def __init__(self, records, policy):
        self.records = records
        self.policy = policy
        self._cache = {}

    def _resized(self, path):
        if path not in self._cache:
            self._cache[path] = synthdata.resize_image(synthdata.read_ppm(path), self.policy.resize_to)
        return self._cache[path]

    def batch(self, indices, rng=None):
        x1, x2, gt = [], [], []
        for k in indices:
            rec = self.records[k]
            for path, out in ((rec.img1, x1), (rec.img2, x2)):
                img = synthdata.crop_image(self._resized(path), self.policy, rng)
                out.append(synthdata.to_network_input(img))
            gt.append(rec.pose.as_vector())
        return np.stack(x1), np.stack(x2), np.stack(gt)


def evaluate_records(model, images, batch_size=PREDICT_BATCH):
    """Predicted RelativePoses for every record of a PairImages set (center crops)."""
    if not images.policy.crop:
        batch_size = 1  # uncropped images may differ in size
    poses = []
    n = len(images.records)
    for start in range(0, n, batch_size):
        x1, x2, _ = images.batch(range(start, min(n, start + batch_size)))
        poses.extend(predict(model, x1, x2))
    return poses


def _validate(model, images):
    poses = evaluate_records(model, images)
    roes = [roe(p.dq, r.pose.dq) for p, r in zip(poses, images.records)]
    rtes = [rte(p.dt, r.pose.dt) for p, r in zip(poses, images.records)]
    return _median(roes), _median(rtes)


def train(model, train_records, val_records, cfg, log_path=None):
    """
    Mini-batch training on the pose loss.

    :param model: SiameseModel, updated in place
    :param train_records: list of PairRecord
    :param val_records: list of PairRecord (median ROE/RTE reported per epoch)
    :param cfg: TrainConfig
    :param log_path: if given, CSV training log written there
    :return: (model, list of EpochLog)
    """
    if not train_records or not val_records:
        raise RegressorError("training and validation manifests must not be empty")
    train_images = PairImages(train_records, model.config.crop_policy(train=True))
    val_images = PairImages(val_records, model.config.crop_policy(train=False))
    names = list(model.params)
    if model.optimizer_state is None:
        params = model.arrays()
        state_cls = nnet.AdamState if cfg.solver == "adam" else nnet.SgdState
        model.optimizer_state = state_cls.zeros(params)

    log = []
    n = len(train_records)
    for epoch in range(1, cfg.epochs + 1):
        order = util.make_rng(cfg.seed, "shuffle", epoch).permutation(n)
        crop_rng = util.make_rng(cfg.seed, "crop", epoch)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            x1, x2, gt = train_images.batch(batch, crop_rng)
            model.zero_grad()
            loss = pose_loss(forward_pair(model, x1, x2), gt, cfg.beta)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"loss became {value} at epoch {epoch}, batch starting at {start}")
            loss.backward()
            grads = [_grad_or_zeros(model.params[k]) for k in names]
            if cfg.solver == "adam":
                new_params, model.optimizer_state = nnet.adam_step(
                    model.arrays(), grads, model.optimizer_state, lr=cfg.lr, wd=cfg.weight_decay
                )
            else:
                new_params, model.optimizer_state = nnet.sgd_step(
                    model.arrays(), grads, model.optimizer_state, lr=cfg.lr, wd=cfg.weight_decay, momentum=cfg.momentum
                )
            for k, p in zip(names, new_params):
                model.params[k].data = p
            total += value * len(batch)
        model.zero_grad()
        val_roe, val_rte = _validate(model, val_images)
        entry = EpochLog(epoch, total / n, val_roe, val_rte)
        log.append(entry)
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: train loss {entry.train_loss:.4f}, "
            f"val median ROE {val_roe:.2f} deg, RTE {val_rte:.2f} deg"
        )
        if log_path:
            write_train_log(log_path, log)
    if log_path and not log:
        write_train_log(log_path, log)
    return model, log


def write_train_log(path, log):
    rows = [{k: repr(v) if isinstance(v, float) else v for k, v in e._asdict().items()} for e in log]
    util.write_csv(path, LOG_HEADER, rows)


# persistence

_LAYER_CONV, _LAYER_POOL = 0.0, 1.0


def _config_tensors(config):
    rows = []
    for layer in config.layers:
        if isinstance(layer, ConvSpec):
            rows.append([_LAYER_CONV, layer.filters, layer.kernel, layer.stride, layer.padding])
        else:
            rows.append([_LAYER_POOL, layer.kernel, layer.stride, 0, 0])
    # SPP levels are stored coarse to fine, in the order of the feature vector
    levels = config.spp.levels if config.spp is not None else ()
    return {
        f"meta.preset.{config.name}": np.zeros(0),
        "meta.layers": np.array(rows, dtype=np.float64).reshape(len(rows), 5),
        "meta.spp_levels": np.array(levels, dtype=np.float64),
        "meta.sizes": np.array(
            [config.in_channels, config.input_size, config.test_size, config.resize_to, config.beta]
        ),
    }


def _config_from_tensors(tensors):
    try:
        name = next(k for k in tensors if k.startswith("meta.preset.")).split(".", 2)[2]
        layers = tuple(
            ConvSpec(int(r[1]), int(r[2]), int(r[3]), int(r[4])) if r[0] == _LAYER_CONV else PoolSpec(int(r[1]), int(r[2]))
            for r in tensors["meta.layers"]
        )
        levels = tuple(int(v) for v in tensors["meta.spp_levels"])
        c, size, test, resize, beta = tensors["meta.sizes"]
    except (StopIteration, KeyError, ValueError) as e:
        raise nnet.ContainerCorruptError(f"weight file lacks model metadata: {e}") from e
    return ModelConfig(
        name, layers, SppSpec(levels) if levels else None, int(size), int(test), int(resize), int(c), float(beta)
    )


def save_weights(model, path):
    tensors = {name: t.data for name, t in model.params.items()}
    tensors.update(_config_tensors(model.config))
    nnet.save_tensors(path, tensors)
    logger.info(f"Saved {model.config.name} weights to {path}")


def load_weights(path, config=None):
    """
    Loads a weight file.

    :param path: RPW1 container written by save_weights (or converted externally)
    :param config: expected ModelConfig; if None the file's own configuration is used
    :return: SiameseModel
    :raises ContainerCorruptError: unreadable file
    :raises ShapeMismatchOnLoadError: tensors that do not fit the expected configuration
    """
    tensors = nnet.load_tensors(path)
    if config is None:
        config = _config_from_tensors(tensors)
    model = build_model(config, seed=0)
    weights = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
    if set(weights) != set(model.params):
        missing = sorted(set(model.params) - set(weights))
        extra = sorted(set(weights) - set(model.params))
        raise ShapeMismatchOnLoadError(f"{path}: missing tensors {missing}, unexpected tensors {extra}")
    for name, t in model.params.items():
        if weights[name].shape != t.shape:
            raise ShapeMismatchOnLoadError(
                f"{path}: tensor {name} has shape {weights[name].shape}, {config.name} expects {t.shape}"
            )
        t.data = weights[name].copy()
    return model
