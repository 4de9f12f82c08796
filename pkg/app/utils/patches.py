import torch
from einops import rearrange


def patchify_images(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[B, 3, H, W] -> [B, P, p*p*3], patches row-major, pixels (p1 p2 c) inside a patch."""
    _, _, H, W = images.shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"Image {H}x{W} is not divisible by patch size {patch_size}")
    return rearrange(images, "b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify_images(patches: torch.Tensor, patch_size: int, rows: int, cols: int) -> torch.Tensor:
    """Inverse of patchify_images."""
    return rearrange(
        patches, "b (h w) (p1 p2 c) -> b c (h p1) (w p2)",
        h=rows, w=cols, p1=patch_size, p2=patch_size, c=3,
    )
