"""2次元放物型SPDE シミュレーション・推定ツールキット"""
