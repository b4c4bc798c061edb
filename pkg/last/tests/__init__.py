"""
Empty init file so pytest imports the tests as part of the package.
"""
