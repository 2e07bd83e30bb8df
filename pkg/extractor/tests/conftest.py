import numpy as np
import pytest
import torch
from PIL import Image


class ConvBackbone(torch.nn.Module):
    """Toy convolutional stage: 32x32 RGB -> (1, 8, 4, 4), may go negative."""

    def __init__(self):
        super().__init__()
        torch.manual_seed(7)
        self.stem = torch.nn.Conv2d(3, 8, kernel_size=8, stride=8)
        self.head = torch.nn.Identity()

    def forward(self, x):
        return self.head(self.stem(x))


class TokenBackbone(torch.nn.Module):
    """Toy token model: 32x32 RGB -> (1, 16 + n_specials, 6) sequence."""

    def __init__(self, n_specials: int = 1):
        super().__init__()
        torch.manual_seed(11)
        self.n_specials = n_specials
        self.proj = torch.nn.Linear(3 * 8 * 8, 6)
        self.specials = torch.nn.Parameter(torch.randn(n_specials, 6))

    def forward(self, x):
        patches = torch.nn.functional.unfold(x, kernel_size=8, stride=8)  # (1, 192, 16)
        tokens = self.proj(patches.transpose(1, 2))  # (1, 16, 6)
        lead = self.specials.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        return torch.cat([lead, tokens], dim=1)


@pytest.fixture(scope="session")
def conv_backbone_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "conv.pt"
    torch.jit.script(ConvBackbone()).save(str(path))
    return path


@pytest.fixture(scope="session")
def eager_backbone_path(tmp_path_factory):
    # pickled module, the form that supports --layer capture
    path = tmp_path_factory.mktemp("models") / "conv_eager.pt"
    torch.save(ConvBackbone(), str(path))
    return path


@pytest.fixture(scope="session")
def token_backbone_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "tokens.pt"
    torch.jit.script(TokenBackbone(1)).save(str(path))
    return path


@pytest.fixture(scope="session")
def register_backbone_path(tmp_path_factory):
    # class token plus four register tokens in front of the grid
    path = tmp_path_factory.mktemp("models") / "registers.pt"
    torch.jit.script(TokenBackbone(5)).save(str(path))
    return path


@pytest.fixture
def tile_dir(tmp_path):
    rng = np.random.default_rng(3)
    d = tmp_path / "tiles"
    d.mkdir()
    for i in range(3):
        arr = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        Image.fromarray(arr, mode="RGB").save(d / f"tile{i}.png")
    return d
