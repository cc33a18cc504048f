"""Desk-scale laboratory for misalignment-resistant image-to-image translation.

Subpackages:

* `tensor`    -- numpy autodiff engine (conv, warp, reductions)
* `warp`      -- deformation fields, re-sampling, smoothness penalty
* `nets`      -- generator / discriminator / registration networks
* `losses`    -- translation, registration and adversarial objectives
* `misalign`  -- the five-level controlled misalignment protocol
* `synthdata` -- procedural paired-stain image synthesis
* `trainer`   -- three-phase adversarial training loop + Adam + checkpoints
* `metrics`   -- PSNR / SSIM / MAE / intensity-profile evaluation
* `cli`       -- `dgrlab` command-line front end
"""

__version__ = "0.1.0"
