"""RGB-D fusion optical/scene flow estimation on plain numpy.

The package is organized around six pieces:

- :mod:`rgbdflow.tape` - float64 tensors with reverse-mode gradients
- :mod:`rgbdflow.encoder` - two-branch attentive RGB-D feature encoder
- :mod:`rgbdflow.flow` - correlation pyramid + recurrent flow refinement
- :mod:`rgbdflow.data` / :mod:`rgbdflow.fileio` - synthetic scenes,
  photometric corruptions, and all on-disk formats
- :mod:`rgbdflow.metrics` - endpoint-error metric suite and aggregation
- :mod:`rgbdflow.cli` - command line pipeline (gen-data, corrupt, train,
  eval, gradcheck, plot)
"""

__version__ = "0.1.0"
