"""Closed-loop training for pose-conditioned novel-view diffusion models.

Submodules:
    sceneforge -- procedural scenes, raycast renderer, dataset building
    diffusion  -- noise schedules, forward process, strided DDIM sampling
    nets       -- frozen encoder, condition embedder, denoiser U-Net
    train      -- score-matching / closed-loop steps, rounds, checkpoints
    metrics    -- PSNR, KID, pose-oracle angle accuracy, mask IoU
    cli        -- gen-data / train / eval / ablate / report commands
"""

__version__ = "0.1.0"
