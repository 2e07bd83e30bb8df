"""Backbone resolution and activation capture.

No weights ship with this package: a backbone is whatever the user
points at.  Supported identifiers:

* a filesystem path to a TorchScript archive or a pickled ``nn.Module``
  (this is how gated pathology foundation models arrive);
* ``torchvision:<name>`` for torchvision architectures, optionally with
  a separate state-dict file.
"""

from pathlib import Path

import torch

from .errors import BackboneError, LayerError


def resolve_backbone(spec: str, weights=None) -> torch.nn.Module:
    path = Path(spec)
    if path.exists():
        try:
            model = torch.jit.load(str(path), map_location="cpu")
        except RuntimeError:
            try:
                model = torch.load(str(path), map_location="cpu", weights_only=False)
            except Exception as exc:
                raise BackboneError(f"{spec}: not a TorchScript archive or pickled module: {exc}") from exc
        if not isinstance(model, torch.nn.Module):
            raise BackboneError(f"{spec}: loaded object is {type(model).__name__}, not a module")
    elif spec.startswith("torchvision:"):
        name = spec.split(":", 1)[1]
        try:
            from torchvision import models as tv_models

            model = tv_models.get_model(name, weights=None)
        except Exception as exc:
            raise BackboneError(f"unknown torchvision model {name!r}: {exc}") from exc
        if weights is not None:
            state = torch.load(str(weights), map_location="cpu", weights_only=True)
            model.load_state_dict(state)
    else:
        raise BackboneError(
            f"cannot resolve backbone {spec!r}: pass a model file path or torchvision:<name>"
        )
    model.eval()
    return model


def capture_activation(model: torch.nn.Module, layer: str, batch: torch.Tensor) -> torch.Tensor:
    """Forward ``batch`` and return the named module's output.

    An empty layer name means the model's own output.
    """
    with torch.no_grad():
        if not layer:
            return model(batch)
        if isinstance(model, torch.jit.ScriptModule):
            # scripted archives cannot take post-hoc hooks; only their
            # output is reachable
            raise LayerError(
                "TorchScript backbones expose only their output; "
                "omit --layer or supply an eager (pickled) module"
            )
        try:
            module = model.get_submodule(layer)
        except AttributeError as exc:
            raise LayerError(f"backbone has no submodule named {layer!r}") from exc
        captured = []
        handle = module.register_forward_hook(lambda m, i, out: captured.append(out))
        try:
            model(batch)
        finally:
            handle.remove()
        if not captured:
            raise LayerError(f"submodule {layer!r} was never called during the forward pass")
        out = captured[-1]
        if isinstance(out, (tuple, list)):
            out = out[0]
        return out
