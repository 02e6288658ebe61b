from rdcnet.cli import main

main()
