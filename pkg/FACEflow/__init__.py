__author__ = 'FACEflow developers'
__version__ = '2026.10.18'
