# Networks package