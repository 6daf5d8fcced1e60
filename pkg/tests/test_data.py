import torch

from mobiledit.data import PALETTE, LatentTask, clip_batch, make_synthetic_dataset


def test_clips_deterministic_and_in_range():
    a, ia = clip_batch(6, (4, 16, 16), seed=3)
    b, ib = clip_batch(6, (4, 16, 16), seed=3)
    assert torch.equal(a, b) and torch.equal(ia, ib)
    assert a.shape == (6, 3, 4, 16, 16)
    assert a.min() >= 0 and a.max() <= 1
    c, _ = clip_batch(6, (4, 16, 16), seed=4)
    assert not torch.equal(a, c)


def test_clips_move():
    clip, _ = next(make_synthetic_dataset(1, (6, 32, 32), seed=0))
    assert not torch.equal(clip[:, 0], clip[:, -1])


def test_prompt_colour_is_recoverable():
    # the pixel farthest from the frame's median colour belongs to the shape and carries the prompt colour
    clips, ids = clip_batch(24, (2, 32, 32), seed=1)
    flat = clips[:, :, 0].flatten(2)
    dist = (flat - flat.median(2, keepdim=True).values).norm(dim=1)
    pix = flat.gather(2, dist.argmax(1)[:, None, None].expand(-1, 3, 1)).squeeze(-1)
    nearest = torch.cdist(pix, PALETTE).argmin(1)
    assert torch.equal(nearest, ids % len(PALETTE))


def test_latent_task():
    task = LatentTask(shape=(4, 2, 4, 4), num_prompts=3, modes=2, jitter=0.0, seed=0)
    g = torch.Generator().manual_seed(0)
    x, ids = task.sample(10, g)
    assert x.shape == (10, 4, 2, 4, 4) and ids.max() < 3
    # zero jitter: every sample is exactly one of its class prototypes
    for xi, pi in zip(x, ids):
        assert any(torch.equal(xi, p) for p in task.prototypes[pi])
    b1, b2 = task.batches(2, 4, seed=5), task.batches(2, 4, seed=5)
    assert all(torch.equal(u, v) for x1, x2 in zip(b1, b2) for u, v in zip(x1, x2))
