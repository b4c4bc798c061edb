# Configuration file for the Sphinx documentation builder.
#
# Only the settings that differ from the sphinx-quickstart defaults are kept.

import os
import sys
sys.path.insert(0, os.path.abspath('..'))

import last

project = 'last'
copyright = "2026, the last developers"
author = 'the last developers'
version = last.__version__
release = last.__version__

extensions = [
    'sphinx.ext.autosummary',
    'sphinx.ext.autodoc',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'sphinx.ext.napoleon',
    'sphinx.ext.intersphinx',
]

autosummary_generate = True
napoleon_google_docstring = False
napoleon_use_param = False
napoleon_use_ivar = True

intersphinx_mapping = {
    'numpy': ('https://numpy.org/doc/stable/', None),
    'pandas': ('https://pandas.pydata.org/docs/', None),
}

templates_path = []
source_suffix = '.rst'
master_doc = 'index'
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'default'

html_theme = 'sphinx_rtd_theme'
html_static_path = []
htmlhelp_basename = 'lastdoc'

man_pages = [
    (master_doc, 'last', 'last Documentation', [author], 1)
]
