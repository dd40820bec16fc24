"""
spm_protocol - ニューラルMACプロトコル (NPM) から確率論理プロトコル (SPM) への変換パイプライン
"""

__version__ = "0.3.0"
