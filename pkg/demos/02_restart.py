"""Checkpoint a run halfway, resume it and compare the diagnostics files byte for byte."""

import shutil
import tempfile
from pathlib import Path

from vnslab.config import default_config
from vnslab.runner import resume_run, run_config

cfg = default_config(particles__per_cell=1, particles__nv=4, time__dt=0.02, time__t_final=1.0,
                     io__checkpoint_every=25, io__svg=False)
root = Path(tempfile.mkdtemp(prefix="vnslab_restart_"))

whole = run_config(cfg, root / "whole")
print(f"continuous run: {whole.state.step} steps, {len(whole.records)} series rows")

# pretend the run died right after the step-25 checkpoint
broken = root / "broken"
shutil.copytree(root / "whole", broken)
resumed = resume_run(broken / "checkpoints" / "ckpt_00000025.bin")
print(f"resumed run:    {resumed.state.step} steps")

a = (root / "whole" / "series.csv").read_bytes()
b = (broken / "series.csv").read_bytes()
print("series.csv identical:", a == b)
print("checkpoint.bin identical:", (root / "whole" / "checkpoint.bin").read_bytes()
      == (broken / "checkpoint.bin").read_bytes())
shutil.rmtree(root)
