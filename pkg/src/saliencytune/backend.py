"""Classifier backend: the contract every model must satisfy to be tunable.

A backend couples a torch module with the identity of one convolutional
layer whose spatial activations feed the explanation branch. It exposes
class scores, that layer's activations from the same forward pass, and
frozen snapshots used to compute detached class-score gradients.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import InputError, NumericError
from .validation import as_image_array

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ActivationBlock:
    """Spatial activations of the designated explanation layer, K x i x j."""

    values: torch.Tensor
    layer_id: str

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InputError(
                f"activation block must be K x i x j, got shape {tuple(self.values.shape)}"
            )
        if self.values.shape[1] < 2 or self.values.shape[2] < 2:
            raise InputError("explanation layer spatial size must be at least 2 x 2")
        if not torch.isfinite(self.values.detach()).all():
            raise NumericError(f"non-finite activations at layer {self.layer_id!r}")

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.values.shape[1]), int(self.values.shape[2])


class _Capture:
    """Forward hook that records one module's output tensor."""

    def __init__(self):
        self.value: Optional[torch.Tensor] = None

    def __call__(self, module, inputs, output):
        self.value = output


class ClassifierBackend:
    """Wraps a torch classifier and designates its explanation layer.

    The module is kept in eval mode: forwards are deterministic, and
    fine-tuning updates parameters without train-mode stochasticity.
    Images enter as H x W x C float arrays in [0, 1]; the declared
    per-channel normalization is applied internally.
    """

    def __init__(
        self,
        module: nn.Module,
        explanation_layer_id: str,
        num_classes: int,
        input_shape: tuple[int, int, int],
        normalization: tuple[tuple[float, ...], tuple[float, ...]] | None = None,
        architecture: dict | None = None,
    ):
        if num_classes < 2:
            raise InputError("num_classes must be at least 2")
        self.module = module.eval()
        self.explanation_layer_id = explanation_layer_id
        self.num_classes = num_classes
        self.input_shape = tuple(int(v) for v in input_shape)
        self.normalization = normalization
        self.architecture = architecture or {"kind": "custom"}
        self.training_step = 0
        named = dict(self.module.named_modules())
        if explanation_layer_id not in named:
            raise InputError(
                f"module has no layer named {explanation_layer_id!r}; "
                f"available: {sorted(n for n in named if n)}"
            )
        self._layer = named[explanation_layer_id]

    # -- tensor plumbing ---------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def to_input_tensor(self, image) -> torch.Tensor:
        """H x W x C array in [0, 1] -> normalized 1 x C x H x W tensor."""
        arr = as_image_array(image, expected_shape=self.input_shape)
        x = torch.as_tensor(arr, dtype=self.dtype).permute(2, 0, 1).unsqueeze(0)
        if self.normalization is not None:
            mean, std = self.normalization
            mean_t = torch.as_tensor(mean, dtype=self.dtype).view(1, -1, 1, 1)
            std_t = torch.as_tensor(std, dtype=self.dtype).view(1, -1, 1, 1)
            x = (x - mean_t) / std_t
        return x

    def forward_tensors(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One forward pass -> (logits [1, num_classes], activations [1, K, i, j])."""
        capture = _Capture()
        handle = self._layer.register_forward_hook(capture)
        try:
            logits = self.module(x)
        finally:
            handle.remove()
        if capture.value is None:
            raise InputError(
                f"layer {self.explanation_layer_id!r} was not reached during forward"
            )
        if logits.shape[-1] != self.num_classes:
            raise InputError(
                f"model produced {logits.shape[-1]} scores, expected {self.num_classes}"
            )
        return logits, capture.value

    # -- spec operations ---------------------------------------------------

    def forward(self, image) -> tuple[np.ndarray, ActivationBlock]:
        """Class probabilities plus the explanation layer's activations.

        Both come from the same pass; probabilities are softmax of the raw
        class scores.
        """
        with torch.no_grad():
            logits, acts = self.forward_tensors(self.to_input_tensor(image))
        if not torch.isfinite(acts).all():
            raise NumericError("non-finite activations during forward")
        probs = torch.softmax(logits[0], dim=0).double().numpy()
        return probs, ActivationBlock(acts[0], self.explanation_layer_id)

    def predict_proba(self, image) -> np.ndarray:
        return self.forward(image)[0]

    def predict(self, image) -> int:
        return int(np.argmax(self.predict_proba(image)))

    def snapshot(self) -> "ModelSnapshot":
        """Frozen deep copy of the current parameters (Alg. 1's temporary model)."""
        for p in self.module.parameters():
            if not torch.isfinite(p).all():
                raise NumericError("cannot snapshot a model with non-finite parameters")
        return ModelSnapshot(self, self.training_step)

    # -- parameter access ----------------------------------------------------

    def parameter_vector(self) -> torch.Tensor:
        """All parameters flattened into one detached vector (test/diagnostic aid)."""
        return torch.cat([p.detach().reshape(-1) for p in self.module.parameters()])

    def state_clone(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, v.detach().clone()) for k, v in self.module.state_dict().items())

    def load_state(self, state_dict) -> None:
        self.module.load_state_dict(state_dict)

    # -- checkpoints ---------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "architecture": self.architecture,
            "explanation_layer_id": self.explanation_layer_id,
            "num_classes": self.num_classes,
            "input_shape": self.input_shape,
            "normalization": self.normalization,
            "state_dict": self.state_clone(),
            "training_step": self.training_step,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def load_checkpoint(cls, path, module: nn.Module | None = None) -> "ClassifierBackend":
        """Restore a backend from disk.

        Reference-CNN checkpoints are self-contained. Checkpoints of wrapped
        external models need the caller to supply a structurally identical
        ``module`` to load the weights into.
        """
        payload = torch.load(path, map_location="cpu", weights_only=False)
        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise InputError(f"unsupported checkpoint format_version {version!r}")
        arch = payload["architecture"]
        if module is None:
            if arch.get("kind") != "reference_cnn":
                raise InputError(
                    f"checkpoint holds a {arch.get('kind')!r} model; pass the module to load into"
                )
            module = _reference_cnn_module(
                num_classes=arch["num_classes"],
                in_channels=arch["in_channels"],
                dtype=getattr(torch, arch.get("dtype", "float32")),
            )
        backend = cls(
            module=module,
            explanation_layer_id=payload["explanation_layer_id"],
            num_classes=payload["num_classes"],
            input_shape=tuple(payload["input_shape"]),
            normalization=payload["normalization"],
            architecture=arch,
        )
        backend.load_state(payload["state_dict"])
        backend.training_step = int(payload["training_step"])
        return backend

    def clone(self) -> "ClassifierBackend":
        """Independent deep copy (used so experiment runs never share a model)."""
        backend = ClassifierBackend(
            module=copy.deepcopy(self.module),
            explanation_layer_id=self.explanation_layer_id,
            num_classes=self.num_classes,
            input_shape=self.input_shape,
            normalization=self.normalization,
            architecture=dict(self.architecture),
        )
        backend.training_step = self.training_step
        return backend


class ModelSnapshot:
    """Immutable parameter copy; the source of detached class-score gradients.

    The snapshot's own parameters never receive gradients, so quantities
    computed here carry no dependency on the live model.
    """

    def __init__(self, backend: ClassifierBackend, step: int):
        module = copy.deepcopy(backend.module).eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self._backend = ClassifierBackend(
            module=module,
            explanation_layer_id=backend.explanation_layer_id,
            num_classes=backend.num_classes,
            input_shape=backend.input_shape,
            normalization=backend.normalization,
            architecture=dict(backend.architecture),
        )
        self.created_at_step = int(step)

    @property
    def num_classes(self) -> int:
        return self._backend.num_classes

    @property
    def explanation_layer_id(self) -> str:
        return self._backend.explanation_layer_id

    def forward(self, image) -> tuple[np.ndarray, ActivationBlock]:
        return self._backend.forward(image)

    def predict(self, image) -> int:
        return self._backend.predict(image)

    def class_score_gradient(self, image, class_index: int) -> torch.Tensor:
        """d(class score) / d(explanation-layer activations), detached, K x i x j.

        The class score is the raw (pre-softmax) output for ``class_index``.
        """
        if not 0 <= int(class_index) < self.num_classes:
            raise InputError(
                f"class index {class_index} out of range [0, {self.num_classes})"
            )
        x = self._backend.to_input_tensor(image).requires_grad_(True)
        logits, acts = self._backend.forward_tensors(x)
        grad = torch.autograd.grad(logits[0, int(class_index)], acts)[0]
        return grad[0].detach()


# -- concrete models ---------------------------------------------------------


def _reference_cnn_module(num_classes: int, in_channels: int, dtype: torch.dtype) -> nn.Module:
    features = nn.Sequential(
        OrderedDict(
            [
                ("conv1", nn.Conv2d(in_channels, 8, kernel_size=3, padding=1)),
                ("relu1", nn.ReLU()),
                ("pool1", nn.MaxPool2d(2)),
                ("conv2", nn.Conv2d(8, 16, kernel_size=3, padding=1)),
                ("relu2", nn.ReLU()),
                ("pool2", nn.MaxPool2d(2)),
            ]
        )
    )
    module = nn.Sequential(
        OrderedDict(
            [
                ("features", features),
                ("flatten", nn.Flatten()),
                ("classifier", nn.Linear(16 * 8 * 8, num_classes)),
            ]
        )
    )
    return module.to(dtype)


def build_reference_cnn(
    num_classes: int = 3,
    in_channels: int = 3,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> ClassifierBackend:
    """Small desk-scale CNN: 32 x 32 input, 8 x 8 x 16 explanation layer.

    Two conv blocks (8 and 16 channels, 3 x 3 kernels, ReLU, 2 x 2 pooling)
    and one fully connected head. Initialization is deterministic per seed.
    """
    generator_state = torch.get_rng_state()
    torch.manual_seed(seed)
    try:
        module = _reference_cnn_module(num_classes, in_channels, dtype)
    finally:
        torch.set_rng_state(generator_state)
    return ClassifierBackend(
        module=module,
        explanation_layer_id="features.pool2",
        num_classes=num_classes,
        input_shape=(32, 32, in_channels),
        architecture={
            "kind": "reference_cnn",
            "num_classes": num_classes,
            "in_channels": in_channels,
            "dtype": str(dtype).removeprefix("torch."),
        },
    )


def last_conv_layer_id(module: nn.Module) -> str:
    """Name of the last Conv2d in forward-definition order."""
    last = None
    for name, sub in module.named_modules():
        if isinstance(sub, nn.Conv2d):
            last = name
    if last is None:
        raise InputError("module has no Conv2d layer to explain")
    return last


def wrap_pretrained(
    module: nn.Module,
    input_shape: tuple[int, int, int],
    num_classes: int | None = None,
    explanation_layer_id: str | None = None,
    normalization: tuple[tuple[float, ...], tuple[float, ...]] | None = None,
) -> ClassifierBackend:
    """Adapter for an externally pretrained classifier (VGG16-style).

    Defaults the explanation layer to the model's last convolutional layer.
    ``num_classes`` is inferred from a probe forward when not given.
    """
    module = module.eval()
    if explanation_layer_id is None:
        explanation_layer_id = last_conv_layer_id(module)
    if num_classes is None:
        h, w, c = input_shape
        probe = torch.zeros(1, c, h, w, dtype=next(module.parameters()).dtype)
        with torch.no_grad():
            out = module(probe)
        num_classes = int(out.shape[-1])
    return ClassifierBackend(
        module=module,
        explanation_layer_id=explanation_layer_id,
        num_classes=num_classes,
        input_shape=input_shape,
        normalization=normalization,
        architecture={"kind": "wrapped", "class_name": type(module).__name__},
    )
