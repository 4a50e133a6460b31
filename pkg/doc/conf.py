# Sphinx configuration for the pyMDL documentation.

import os
import sys
from datetime import date

sys.path.insert(0, os.path.abspath(".."))

from pyMDL import __version__  # noqa: E402

extensions = ["sphinx.ext.autodoc", "sphinx.ext.napoleon"]
source_suffix = ".rst"
master_doc = "index_TOC"

project = "pyMDL"
copyright = "%d, pyMDL developers" % date.today().year
version = ".".join(__version__.split(".")[:2])
release = __version__

exclude_patterns = ["_build"]
pygments_style = "sphinx"

html_theme = "sphinxdoc"
html_show_sourcelink = False
htmlhelp_basename = "pyMDLdoc"
